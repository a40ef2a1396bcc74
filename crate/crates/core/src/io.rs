//! 8-bit PGM (P5) and PPM (P6) images, and the on-disk dataset layout:
//!
//! ```text
//! images/NNNN.pgm      input slices
//! masks/NNNN.pgm       binary masks (255 = retina)
//! boundaries/NNNN.csv  `column,row` per column
//! manifest.csv         `id,split`
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::postproc::BoundaryCurve;
use crate::synth::SegmentationSample;
use crate::tensor::{Shape, Tensor};

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::ImageFormat {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(format_err(path, "missing P5/P6 magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "malformed header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format_err(
            path,
            format!("image size {width}x{height} must be positive"),
        ));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported (8-bit only)")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Reads a binary PGM into a `1 x 1 x h x w` tensor scaled to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let hdr = parse_header(&bytes, path)?;
    if &hdr.magic != b"P5" {
        return Err(format_err(
            path,
            format!(
                "unsupported format {}; expected binary PGM (P5)",
                String::from_utf8_lossy(&hdr.magic)
            ),
        ));
    }
    let n = hdr.width * hdr.height;
    let data = bytes
        .get(hdr.data_start..hdr.data_start + n)
        .ok_or_else(|| format_err(path, format!("expected {n} pixel bytes, file is truncated")))?;
    let scale = hdr.maxval as f64;
    let values = data.iter().map(|&b| (b as f64 / scale).min(1.0)).collect();
    Tensor::from_vec(Shape::new(1, 1, hdr.height, hdr.width), values)
}

/// Writes plane `(0, 0)` of `image` as binary PGM, mapping `[0, 1]` to `0..=255`.
pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f64>) -> Result<()> {
    let s = image.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(image.plane(0, 0).iter().map(|&v| quantize(v)));
    fs::write(path, out)?;
    Ok(())
}

pub const GROUND_TRUTH_COLOR: [u8; 3] = [0, 200, 0];
pub const PREDICTION_COLOR: [u8; 3] = [230, 0, 0];

/// RGB rendering of `image` with each curve drawn one pixel thick.
pub fn render_overlay(image: &Tensor<f64>, curves: &[(&BoundaryCurve, [u8; 3])]) -> (usize, usize, Vec<u8>) {
    let s = image.shape();
    let mut rgb: Vec<u8> = image.plane(0, 0).iter().flat_map(|&v| [quantize(v); 3]).collect();
    for (curve, color) in curves {
        for (c, row) in curve.rows.iter().enumerate().take(s.w) {
            if let Some(r) = row {
                let r = r.round();
                if r >= 0.0 && (r as usize) < s.h {
                    let i = 3 * (r as usize * s.w + c);
                    rgb[i..i + 3].copy_from_slice(color);
                }
            }
        }
    }
    (s.h, s.w, rgb)
}

pub fn write_overlay(path: impl AsRef<Path>, image: &Tensor<f64>, curves: &[(&BoundaryCurve, [u8; 3])]) -> Result<()> {
    let (h, w, rgb) = render_overlay(image, curves);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PPM as `(height, width, rgb bytes)`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let hdr = parse_header(&bytes, path)?;
    if &hdr.magic != b"P6" || hdr.maxval != 255 {
        return Err(format_err(path, "expected binary PPM (P6) with maxval 255"));
    }
    let n = 3 * hdr.width * hdr.height;
    let data = bytes
        .get(hdr.data_start..hdr.data_start + n)
        .ok_or_else(|| format_err(path, "truncated pixel data"))?;
    Ok((hdr.height, hdr.width, data.to_vec()))
}

pub fn boundary_csv(curve: &BoundaryCurve) -> String {
    let mut s = String::from("column,row\n");
    for (c, r) in curve.rows.iter().enumerate() {
        match r {
            Some(r) => writeln!(s, "{c},{r}"),
            None => writeln!(s, "{c},"),
        }
        .expect("writing to a String");
    }
    s
}

pub fn write_boundary(path: impl AsRef<Path>, curve: &BoundaryCurve) -> Result<()> {
    fs::write(path, boundary_csv(curve))?;
    Ok(())
}

pub fn read_boundary(path: impl AsRef<Path>) -> Result<BoundaryCurve> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, msg: &str| Error::Data(format!("{}:{line}: {msg}", path.display()));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (c, r) = line
            .split_once(',')
            .ok_or_else(|| bad(i + 1, "expected `column,row`"))?;
        let c: usize = c.trim().parse().map_err(|_| bad(i + 1, "bad column index"))?;
        if c != rows.len() {
            return Err(bad(i + 1, "columns must be listed in order starting at 0"));
        }
        let r = r.trim();
        rows.push(if r.is_empty() {
            None
        } else {
            Some(r.parse().map_err(|_| bad(i + 1, "bad row value"))?)
        });
    }
    Ok(BoundaryCurve { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

/// One dataset entry as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub split: SplitTag,
    pub sample: SegmentationSample,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:04}")
}

fn subdirs(root: &Path) -> [PathBuf; 3] {
    [root.join("images"), root.join("masks"), root.join("boundaries")]
}

/// Writes `samples` under `root`, tagging each index found in `train` as a
/// training sample and every other one as test.
pub fn write_dataset(root: impl AsRef<Path>, samples: &[SegmentationSample], train: &[usize]) -> Result<()> {
    let root = root.as_ref();
    let [images, masks, boundaries] = subdirs(root);
    for d in [&images, &masks, &boundaries] {
        fs::create_dir_all(d)?;
    }
    let mut manifest = String::from("id,split\n");
    for (i, s) in samples.iter().enumerate() {
        let id = sample_id(i);
        write_image(images.join(format!("{id}.pgm")), &s.image)?;
        write_image(masks.join(format!("{id}.pgm")), &s.mask)?;
        write_boundary(boundaries.join(format!("{id}.csv")), &s.boundary)?;
        let tag = if train.contains(&i) {
            SplitTag::Train
        } else {
            SplitTag::Test
        };
        let _ = writeln!(manifest, "{id},{}", tag.as_str());
    }
    fs::write(root.join("manifest.csv"), manifest)?;
    Ok(())
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<Record>> {
    let root = root.as_ref();
    let manifest_path = root.join("manifest.csv");
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let [images, masks, boundaries] = subdirs(root);
    let mut out = Vec::new();
    for (i, line) in manifest.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("{}:{}: expected `id,split`", manifest_path.display(), i + 1)))?;
        let split = match split.trim() {
            "train" => SplitTag::Train,
            "test" => SplitTag::Test,
            other => {
                return Err(Error::Data(format!(
                    "{}:{}: unknown split `{other}`",
                    manifest_path.display(),
                    i + 1
                )))
            }
        };
        let id = id.trim().to_string();
        let image = read_image(images.join(format!("{id}.pgm")))?;
        let mask = read_image(masks.join(format!("{id}.pgm")))?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let boundary = read_boundary(boundaries.join(format!("{id}.csv")))?;
        if image.shape() != mask.shape() || boundary.len() != image.shape().w {
            return Err(Error::Data(format!(
                "sample {id}: image, mask and boundary sizes disagree"
            )));
        }
        out.push(Record {
            id,
            split,
            sample: SegmentationSample { image, mask, boundary },
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", root.display())));
    }
    Ok(out)
}
