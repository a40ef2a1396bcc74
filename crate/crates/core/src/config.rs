//! The merged run configuration: model, training, synthesis, evaluation and
//! paths, read from a flat `section.key=value` file with overrides.
//!
//! Every key remembers where its value came from. All randomness derives
//! from the single top-level `seed` through named sub-seeds.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{parse_f64, parse_u64, parse_usize, ModelConfig};
use crate::postproc::EvalConfig;
use crate::synth::SynthSpec;
use crate::tensor::DType;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        })
    }
}

/// Named streams derived from the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    Data,
    Split,
    Init,
    Shuffle,
}

impl SeedPurpose {
    pub const ALL: [SeedPurpose; 4] = [
        SeedPurpose::Data,
        SeedPurpose::Split,
        SeedPurpose::Init,
        SeedPurpose::Shuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SeedPurpose::Data => "data",
            SeedPurpose::Split => "split",
            SeedPurpose::Init => "init",
            SeedPurpose::Shuffle => "shuffle",
        }
    }
}

/// First output of the ChaCha8 stream `purpose` keyed by `seed`.
pub fn sub_seed(seed: u64, purpose: SeedPurpose) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64 + 1);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    /// Dataset directory.
    pub data: PathBuf,
    /// Output directory of the current command.
    pub out: PathBuf,
    /// Checkpoints to evaluate or predict with; empty means `out/model.ckpt`.
    pub checkpoints: Vec<PathBuf>,
    pub image: Option<PathBuf>,
    /// Optional ground-truth boundary CSV drawn next to a prediction.
    pub ground_truth: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            checkpoints: Vec::new(),
            image: None,
            ground_truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// `train.seed` is ignored in favour of the shuffle sub-seed.
    pub train: TrainConfig,
    /// `synth.seed` is ignored in favour of the data sub-seed.
    pub synth: SynthSpec,
    pub count: usize,
    pub train_fraction: f64,
    pub eval: EvalConfig,
    pub paths: Paths,
    provenance: BTreeMap<String, Provenance>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            count: 20,
            train_fraction: 0.5,
            eval: EvalConfig::default(),
            paths: Paths::default(),
            provenance: BTreeMap::new(),
        }
    }
}

fn path_list(v: &str) -> Vec<PathBuf> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn seed_for(&self, purpose: SeedPurpose) -> u64 {
        sub_seed(self.seed, purpose)
    }

    /// The synthesis spec with its seed set from the data sub-seed.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed_for(SeedPurpose::Data),
            ..self.synth.clone()
        }
    }

    /// The training config with its seed set from the shuffle sub-seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed_for(SeedPurpose::Shuffle),
            ..self.train.clone()
        }
    }

    pub fn provenance(&self, key: &str) -> Provenance {
        self.provenance.get(key).copied().unwrap_or(Provenance::Default)
    }

    /// Whether any `model.*` key was set by a file or flag.
    pub fn model_is_explicit(&self) -> bool {
        self.provenance.keys().any(|k| k.starts_with("model."))
    }

    /// Applies `key=value`, recording `source` as its provenance.
    pub fn set(&mut self, key: &str, value: &str, source: Provenance) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        let (section, name) = key.split_once('.').unwrap_or(("", key));
        match section {
            "" if name == "seed" => self.seed = parse_u64(key, value)?,
            "model" => {
                self.model.set(name, value)?;
                if name == "preset" {
                    for (k, _) in self.model.to_pairs() {
                        self.provenance.insert(format!("model.{k}"), source);
                    }
                    return Ok(());
                }
            }
            "train" => match name {
                "lr" => self.train.initial_lr = parse_f64(key, value)?,
                "weight_decay" => self.train.weight_decay = parse_f64(key, value)?,
                "poly_power" => self.train.poly_power = parse_f64(key, value)?,
                "max_iter" => self.train.max_iter = parse_usize(key, value)?,
                "batch_size" => self.train.batch_size = parse_usize(key, value)?,
                "checkpoint_every" => self.train.checkpoint_every = parse_usize(key, value)?,
                "bce_epsilon" => self.train.bce_epsilon = parse_f64(key, value)?,
                "dtype" => self.train.dtype = value.parse::<DType>()?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            },
            "synth" => {
                let s = &mut self.synth;
                match name {
                    "height" => s.height = parse_usize(key, value)?,
                    "width" => s.width = parse_usize(key, value)?,
                    "base_depth" => s.base_depth = parse_f64(key, value)?,
                    "dip_center" => s.dip_center = parse_f64(key, value)?,
                    "dip_jitter" => s.dip_jitter = parse_f64(key, value)?,
                    "dip_width" => s.dip_width = parse_f64(key, value)?,
                    "dip_depth" => s.dip_depth = parse_f64(key, value)?,
                    "smoothness" => s.smoothness = parse_f64(key, value)?,
                    "noise" => s.noise = parse_f64(key, value)?,
                    "vitreous_mean" => s.vitreous_mean = parse_f64(key, value)?,
                    "retina_mean" => s.retina_mean = parse_f64(key, value)?,
                    "blur" => s.blur = parse_f64(key, value)?,
                    "count" => self.count = parse_usize(key, value)?,
                    "train_fraction" => self.train_fraction = parse_f64(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                }
            }
            "eval" => match name {
                "threshold" => self.eval.threshold = parse_f64(key, value)?,
                "min_area_fraction" => self.eval.min_area_fraction = parse_f64(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            },
            "paths" => match name {
                "data" => self.paths.data = PathBuf::from(value),
                "out" => self.paths.out = PathBuf::from(value),
                "checkpoints" => self.paths.checkpoints = path_list(value),
                "image" => self.paths.image = opt_path(value),
                "ground_truth" => self.paths.ground_truth = opt_path(value),
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            },
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        self.provenance.insert(key.to_string(), source);
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str, source: Provenance) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v, source)
    }

    /// Applies every setting in `text`. Blank lines and `#` comments,
    /// including trailing ones, are ignored.
    pub fn apply_text(&mut self, text: &str, source: Provenance) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line, source).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    i + 1,
                    e.to_string().trim_start_matches("invalid configuration: ")
                ))
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, Provenance::File).map_err(|e| {
            Error::Config(format!(
                "{}: {}",
                path.display(),
                e.to_string().trim_start_matches("invalid configuration: ")
            ))
        })?;
        Ok(cfg)
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut v = vec![("seed".to_string(), self.seed.to_string())];
        v.extend(
            self.model
                .to_pairs()
                .into_iter()
                .map(|(k, val)| (format!("model.{k}"), val)),
        );
        let t = &self.train;
        for (k, val) in [
            ("lr", format!("{:?}", t.initial_lr)),
            ("weight_decay", format!("{:?}", t.weight_decay)),
            ("poly_power", format!("{:?}", t.poly_power)),
            ("max_iter", t.max_iter.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("bce_epsilon", format!("{:?}", t.bce_epsilon)),
            ("dtype", t.dtype.name().to_string()),
        ] {
            v.push((format!("train.{k}"), val));
        }
        let s = &self.synth;
        for (k, val) in [
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("base_depth", format!("{:?}", s.base_depth)),
            ("dip_center", format!("{:?}", s.dip_center)),
            ("dip_jitter", format!("{:?}", s.dip_jitter)),
            ("dip_width", format!("{:?}", s.dip_width)),
            ("dip_depth", format!("{:?}", s.dip_depth)),
            ("smoothness", format!("{:?}", s.smoothness)),
            ("noise", format!("{:?}", s.noise)),
            ("vitreous_mean", format!("{:?}", s.vitreous_mean)),
            ("retina_mean", format!("{:?}", s.retina_mean)),
            ("blur", format!("{:?}", s.blur)),
            ("count", self.count.to_string()),
            ("train_fraction", format!("{:?}", self.train_fraction)),
        ] {
            v.push((format!("synth.{k}"), val));
        }
        v.push(("eval.threshold".into(), format!("{:?}", self.eval.threshold)));
        v.push((
            "eval.min_area_fraction".into(),
            format!("{:?}", self.eval.min_area_fraction),
        ));
        let p = &self.paths;
        let checkpoints = p
            .checkpoints
            .iter()
            .map(|c| c.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        v.push(("paths.data".into(), p.data.display().to_string()));
        v.push(("paths.out".into(), p.out.display().to_string()));
        v.push(("paths.checkpoints".into(), checkpoints));
        v.push(("paths.image".into(), show_path(&p.image)));
        v.push(("paths.ground_truth".into(), show_path(&p.ground_truth)));
        v
    }

    /// The resolved configuration: one `key=value  # provenance` line per
    /// key, preceded by the derived sub-seeds as comments. Reading it back
    /// reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for p in SeedPurpose::ALL {
            let _ = writeln!(s, "# sub-seed {} = {}", p.name(), self.seed_for(p));
        }
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}  # {}", self.provenance(&k));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.count < 2 {
            return Err(Error::Config(format!(
                "synth.count = {} must be at least 2",
                self.count
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "synth.train_fraction = {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!(
                "eval.threshold = {} must lie in [0, 1]",
                self.eval.threshold
            )));
        }
        if !(0.0..1.0).contains(&self.eval.min_area_fraction) {
            return Err(Error::Config(format!(
                "eval.min_area_fraction = {} must lie in [0, 1)",
                self.eval.min_area_fraction
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("model.attention", "off", Provenance::Flag).unwrap();
        c.set("train.dtype", "f32", Provenance::File).unwrap();
        c.set("paths.checkpoints", "a.ckpt,b.ckpt", Provenance::Flag).unwrap();
        c.set("seed", "7", Provenance::Flag).unwrap();
        let text = c.to_text();
        assert!(text.contains("model.attention=off  # flag"));
        assert!(text.contains("train.lr=0.001  # default"));
        let mut back = RunConfig::default();
        back.apply_text(&text, Provenance::File).unwrap();
        assert_eq!(back.entries(), c.entries());
        assert_eq!(back.provenance("seed"), Provenance::File);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(
            c.set("train.momentum", "0.9", Provenance::Flag),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            c.set("train.max_iter", "-1", Provenance::Flag),
            Err(Error::Config(_))
        ));
        let err = c.apply_text("seed=1\nbogus\n", Provenance::File).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn sub_seeds_differ_by_purpose_and_seed() {
        let a: Vec<u64> = SeedPurpose::ALL.iter().map(|&p| sub_seed(0, p)).collect();
        let mut dedup = a.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 4);
        assert_ne!(sub_seed(1, SeedPurpose::Data), a[0]);
        let c = RunConfig::default();
        assert_eq!(c.synth_spec().seed, a[0]);
        assert_eq!(c.train_config().seed, a[3]);
    }

    #[test]
    fn preset_marks_every_model_key() {
        let mut c = RunConfig::default();
        c.set("model.preset", "tiny", Provenance::Flag).unwrap();
        assert_eq!(c.model, ModelConfig::tiny());
        assert_eq!(c.provenance("model.base_width"), Provenance::Flag);
        assert!(c.model_is_explicit());
    }
}
