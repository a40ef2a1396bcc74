//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CACENET\0"
//! version   u32
//! dtype     u8       4 = f32, 8 = f64
//! config    u32 length + UTF-8 `model.key=value` lines
//! count     u32      number of records
//! record*   name (u32 length + UTF-8), kind u8, shape 4 x u64,
//!           dtype u8, values, crc32 u32 over everything from name to values
//! ```
//!
//! Record kinds 0..=3 are parameters (see [`ParamKind::tag`]); 4 is a
//! running-statistics buffer.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Shape, Tensor};

use super::{CaceNet, ModelConfig};

pub const MAGIC: &[u8; 8] = b"CACENET\0";
pub const FORMAT_VERSION: u32 = 1;
const BUFFER_KIND: u8 = 4;

/// Header fields of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    pub records: usize,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes<T: Real>(net: &CaceNet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.push(T::DTYPE.tag());
    let cfg = net.config().to_text();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    let store = net.store();
    put_u32(&mut out, (store.params().len() + store.buffers().len()) as u32);
    let params = store.params().iter().map(|p| (&p.name, p.kind.tag(), &p.value));
    let buffers = store.buffers().iter().map(|b| (&b.name, BUFFER_KIND, &b.value));
    for (name, kind, value) in params.chain(buffers) {
        let start = out.len();
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(kind);
        for d in value.shape().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in value.data() {
            v.write_le(&mut out);
        }
        let crc = crc32fast::hash(&out[start..]);
        put_u32(&mut out, crc);
    }
    out
}

pub fn save<T: Real>(net: &CaceNet<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated file while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(format!("{what} is not valid UTF-8")))
    }

    fn header(&mut self) -> Result<CheckpointInfo> {
        if self.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(self.err("not a CACE-Net checkpoint (bad magic)"));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!(
                "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let tag = self.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| self.err(format!("unknown dtype tag {tag}")))?;
        let text = self.string("model config")?;
        let config = ModelConfig::from_text(&text).map_err(|e| self.err(format!("bad model config: {e}")))?;
        let records = self.u32("record count")? as usize;
        Ok(CheckpointInfo {
            version,
            dtype,
            config,
            records,
        })
    }
}

struct Record {
    kind: u8,
    shape: Shape,
    values: Vec<f64>,
}

fn parse(bytes: &[u8], path: &Path) -> Result<(CheckpointInfo, Vec<(String, Record)>)> {
    let mut r = Reader { bytes, pos: 0, path };
    let info = r.header()?;
    let mut records = Vec::with_capacity(info.records);
    for i in 0..info.records {
        let start = r.pos;
        let name = r.string("record name")?;
        let kind = r.u8("record kind")?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u64("record shape")? as usize;
        }
        if dims.contains(&0) {
            return Err(r.err(format!("record {i} `{name}` has a zero dimension")));
        }
        let tag = r.u8("record dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| r.err(format!("record `{name}`: unknown dtype tag {tag}")))?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let len = shape
            .numel()
            .checked_mul(dtype.size_of())
            .ok_or_else(|| r.err(format!("record `{name}` is implausibly large")))?;
        let raw = r.take(len, "record values")?;
        let values = match dtype {
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
        };
        let crc = crc32fast::hash(&bytes[start..r.pos]);
        let stored = r.u32("record checksum")?;
        if crc != stored {
            return Err(r.err(format!("checksum failure in record `{name}`")));
        }
        records.push((name, Record { kind, shape, values }));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    Ok((info, records))
}

/// Reads only the header.
pub fn peek(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    Reader {
        bytes: &bytes,
        pos: 0,
        path,
    }
    .header()
}

pub fn from_bytes<T: Real>(bytes: &[u8], path: &Path) -> Result<CaceNet<T>> {
    let (info, records) = parse(bytes, path)?;
    let mut net = CaceNet::<T>::new(info.config, 0)?;
    let err = |message: String| Error::Checkpoint {
        path: PathBuf::from(path),
        message,
    };
    let mut by_name: HashMap<String, Record> = HashMap::with_capacity(records.len());
    for (name, rec) in records {
        if by_name.insert(name.clone(), rec).is_some() {
            return Err(err(format!("duplicate record `{name}`")));
        }
    }
    let mut fill = |name: &str, kind: u8, target: &mut Tensor<T>| -> Result<()> {
        let rec = by_name
            .remove(name)
            .ok_or_else(|| err(format!("missing parameter `{name}`")))?;
        if rec.kind != kind {
            return Err(err(format!(
                "record `{name}` has kind {} but the model expects {kind}",
                rec.kind
            )));
        }
        if rec.shape != target.shape() {
            return Err(err(format!(
                "record `{name}` has shape {} but the model expects {}",
                rec.shape,
                target.shape()
            )));
        }
        for (t, v) in target.data_mut().iter_mut().zip(rec.values) {
            *t = T::lit(v);
        }
        Ok(())
    };
    let store = net.store_mut();
    for p in store.params_mut() {
        fill(&p.name, p.kind.tag(), &mut p.value)?;
    }
    for b in store.buffers_mut() {
        fill(&b.name, BUFFER_KIND, &mut b.value)?;
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(err(format!("unexpected record `{extra}` not present in the model")));
    }
    Ok(net)
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<CaceNet<T>> {
    let path = path.as_ref();
    from_bytes(&fs::read(path)?, path)
}

/// Loads a checkpoint and verifies it was written for `expected`.
pub fn load_with_config<T: Real>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<CaceNet<T>> {
    let net = load::<T>(path)?;
    if net.config() != expected {
        let mut diffs = Vec::new();
        for ((k, a), (_, b)) in expected.to_pairs().into_iter().zip(net.config().to_pairs()) {
            if a != b {
                diffs.push(format!("model.{k}: expected {a}, checkpoint has {b}"));
            }
        }
        return Err(Error::ConfigMismatch(diffs.join("; ")));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> CaceNet {
        CaceNet::new(ModelConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = net();
        a.store_mut().buffers_mut()[0].value.data_mut()[0] = 0.123;
        let b: CaceNet = from_bytes(&to_bytes(&a), Path::new("mem")).unwrap();
        for (p, q) in a.store().params().iter().zip(b.store().params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.data(), q.value.data());
        }
        for (p, q) in a.store().buffers().iter().zip(b.store().buffers()) {
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn detects_truncation_and_corruption() {
        let bytes = to_bytes(&net());
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            let e = from_bytes::<f64>(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(e, Error::Checkpoint { .. }), "{e}");
        }
        let mut flipped = bytes.clone();
        let i = flipped.len() - 10;
        flipped[i] ^= 0x40;
        let msg = from_bytes::<f64>(&flipped, Path::new("x")).unwrap_err().to_string();
        assert!(msg.contains("checksum"), "{msg}");
    }

    #[test]
    fn rejects_other_versions() {
        let mut bytes = to_bytes(&net());
        bytes[8] = 9;
        let msg = from_bytes::<f64>(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(msg.contains("version 9"), "{msg}");
    }
}
