//! End-to-end commands: synthesise a dataset, train, evaluate, predict and
//! run the gradient checks. Each command writes its resolved configuration
//! into its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, SeedPurpose};
use crate::error::{Error, Result};
use crate::gradcheck::{self, OpCheck, SuiteConfig};
use crate::io::{self, Record, SplitTag};
use crate::model::{checkpoint, CaceNet, Mode, ModelConfig};
use crate::postproc::{
    boundary_of, evaluate, extract_boundary, mae, per_image_csv, summary_csv, BoundaryCurve, EvalItem, EvalReport,
    Mask, SummaryTable,
};
use crate::synth::{self, SegmentationSample};
use crate::tensor::{DType, Real, Tensor};
use crate::training::{self, loss_csv, LossRecord};

pub const MODEL_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const SUMMARY_FILE: &str = "eval_summary.csv";
pub const TABLE_FILE: &str = "eval_table.txt";

fn write_resolved(dir: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("resolved_{command}.cfg"));
    fs::write(&path, cfg.to_text())?;
    Ok(path)
}

/// Entries `write_dataset` creates; only these are cleared by `force`.
const DATASET_ENTRIES: [&str; 5] = ["images", "masks", "boundaries", "manifest.csv", "resolved_synth.cfg"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub dir: PathBuf,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<SynthSummary> {
    cfg.validate()?;
    let dir = &cfg.paths.data;
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Data(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        for entry in DATASET_ENTRIES {
            let p = dir.join(entry);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }
    let samples = synth::generate(&cfg.synth_spec(), cfg.count)?;
    let (train, test) = synth::split_indices(cfg.count, cfg.train_fraction, cfg.seed_for(SeedPurpose::Split))?;
    io::write_dataset(dir, &samples, &train)?;
    write_resolved(dir, "synth", cfg)?;
    log::info!(
        "wrote {} samples ({} train / {} test) to {}",
        cfg.count,
        train.len(),
        test.len(),
        dir.display()
    );
    Ok(SynthSummary {
        dir: dir.clone(),
        train,
        test,
    })
}

/// Brings a sample to the model input size: bilinear for the image,
/// nearest for the mask, and the boundary re-read from the resized mask.
pub fn fit_to_model(sample: &SegmentationSample, model: &ModelConfig) -> Result<SegmentationSample> {
    let (h, w) = model.input_size;
    let s = sample.image.shape();
    if (s.h, s.w) == (h, w) {
        return Ok(sample.clone());
    }
    let mask = synth::resize_mask(&sample.mask, h, w)?;
    Ok(SegmentationSample {
        image: synth::resize(&sample.image, h, w)?,
        boundary: boundary_of(&Mask::from_tensor(&mask, 0, 0)),
        mask,
    })
}

fn split_records(records: Vec<Record>, tag: SplitTag) -> Vec<Record> {
    records.into_iter().filter(|r| r.split == tag).collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<LossRecord>,
}

fn train_typed<T: Real>(cfg: &RunConfig, samples: &[SegmentationSample], out: &Path) -> Result<Vec<LossRecord>> {
    let mut net = CaceNet::<T>::new(cfg.model.clone(), cfg.seed_for(SeedPurpose::Init))?;
    let tcfg = cfg.train_config();
    let ckpt_dir = out.join("checkpoints");
    if tcfg.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let history = training::train(&mut net, samples, &tcfg, |iter, net| {
        checkpoint::save(net, ckpt_dir.join(format!("iter_{iter:06}.ckpt")))
    })?;
    checkpoint::save(&net, out.join(MODEL_FILE))?;
    Ok(history)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let records = split_records(io::read_dataset(&cfg.paths.data)?, SplitTag::Train);
    if records.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} has no training samples",
            cfg.paths.data.display()
        )));
    }
    let samples = records
        .iter()
        .map(|r| fit_to_model(&r.sample, &cfg.model))
        .collect::<Result<Vec<_>>>()?;
    let out = &cfg.paths.out;
    write_resolved(out, "train", cfg)?;
    log::info!(
        "training {} on {} samples for {} iterations ({})",
        cfg.model.method_name(),
        samples.len(),
        cfg.train.max_iter,
        cfg.train.dtype.name()
    );
    let history = match cfg.train.dtype {
        DType::F32 => train_typed::<f32>(cfg, &samples, out)?,
        DType::F64 => train_typed::<f64>(cfg, &samples, out)?,
    };
    fs::write(out.join(LOSS_FILE), loss_csv(&history))?;
    Ok(TrainSummary {
        checkpoint: out.join(MODEL_FILE),
        history,
    })
}

/// A loaded network in whichever precision its checkpoint was written.
pub enum LoadedNet {
    F32(CaceNet<f32>),
    F64(CaceNet<f64>),
}

impl LoadedNet {
    /// Loads `path`, insisting on `expected` when given.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let info = checkpoint::peek(path)?;
        if let Some(want) = expected {
            if &info.config != want {
                // Produces the key-by-key mismatch message.
                checkpoint::load_with_config::<f64>(path, want)?;
            }
        }
        Ok(match info.dtype {
            DType::F32 => LoadedNet::F32(checkpoint::load(path)?),
            DType::F64 => LoadedNet::F64(checkpoint::load(path)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedNet::F32(n) => n.config(),
            LoadedNet::F64(n) => n.config(),
        }
    }

    /// Probability map at the model input size.
    pub fn predict(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (h, w) = self.config().input_size;
        let s = image.shape();
        let x = if (s.h, s.w) == (h, w) {
            image.clone()
        } else {
            synth::resize(image, h, w)?
        };
        Ok(match self {
            LoadedNet::F32(n) => n.predict(&x.cast())?.cast(),
            LoadedNet::F64(n) => n.predict(&x)?,
        })
    }
}

fn checkpoint_list(cfg: &RunConfig) -> Vec<PathBuf> {
    if cfg.paths.checkpoints.is_empty() {
        vec![cfg.paths.out.join(MODEL_FILE)]
    } else {
        cfg.paths.checkpoints.clone()
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Scores every configured checkpoint on the test split, writing a summary
/// CSV with one row per checkpoint, a per-image CSV for each and a table.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let records = split_records(io::read_dataset(&cfg.paths.data)?, SplitTag::Test);
    if records.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} has no test samples",
            cfg.paths.data.display()
        )));
    }
    let expected = cfg.model_is_explicit().then_some(&cfg.model);
    let paths = checkpoint_list(cfg);
    let nets = paths
        .iter()
        .map(|p| LoadedNet::load(p, expected))
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<String> = nets.iter().map(|n| n.config().method_name().to_string()).collect();
    for i in 0..names.len() {
        if names.iter().filter(|n| **n == names[i]).count() > 1 {
            let stem = paths[i]
                .parent()
                .and_then(Path::file_name)
                .unwrap_or_default()
                .to_string_lossy();
            names[i] = format!("{}[{}]", names[i], stem);
        }
    }

    let out = &cfg.paths.out;
    write_resolved(out, "eval", cfg)?;
    let mut reports = Vec::with_capacity(nets.len());
    for (net, name) in nets.iter().zip(&names) {
        let fitted = records
            .iter()
            .map(|r| fit_to_model(&r.sample, net.config()))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<EvalItem<'_>> = records
            .iter()
            .zip(&fitted)
            .map(|(r, s)| EvalItem {
                id: r.id.clone(),
                image: &s.image,
                mask: &s.mask,
                gt: &s.boundary,
            })
            .collect();
        let seg = |image: &Tensor<f64>, _: &Tensor<f64>| net.predict(image);
        let report = evaluate(name, &seg, &items, &cfg.eval);
        fs::write(
            out.join(format!("eval_{}_per_image.csv", slug(name))),
            per_image_csv(&report),
        )?;
        reports.push(report);
    }
    fs::write(out.join(SUMMARY_FILE), summary_csv(&reports))?;
    fs::write(out.join(TABLE_FILE), SummaryTable(&reports).to_string())?;
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: PathBuf,
    pub boundary: PathBuf,
    pub overlay: PathBuf,
    pub curve: BoundaryCurve,
    /// MAE against the ground truth, when one was supplied.
    pub mae: Option<f64>,
}

/// Segments one image. The probability map is brought back to the image
/// size before the boundary is extracted.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Prediction> {
    cfg.validate()?;
    let image_path = cfg
        .paths
        .image
        .as_ref()
        .ok_or_else(|| Error::Config("predict needs an image (--image or paths.image)".into()))?;
    let ckpts = checkpoint_list(cfg);
    if ckpts.len() != 1 {
        return Err(Error::Config(format!(
            "predict takes one checkpoint, got {}",
            ckpts.len()
        )));
    }
    let expected = cfg.model_is_explicit().then_some(&cfg.model);
    let net = LoadedNet::load(&ckpts[0], expected)?;
    let image = io::read_image(image_path)?;
    let s = image.shape();
    let mut prob = net.predict(&image)?;
    if prob.shape() != s {
        prob = synth::resize(&prob, s.h, s.w)?;
    }
    let ex = extract_boundary(&prob, &cfg.eval);
    let gt = cfg.paths.ground_truth.as_ref().map(io::read_boundary).transpose()?;
    let score = match &gt {
        Some(g) => Some(mae(&ex.boundary, g)?),
        None => None,
    };

    let out = &cfg.paths.out;
    write_resolved(out, "predict", cfg)?;
    let stem = image_path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    let mask_path = out.join(format!("{stem}_mask.pgm"));
    let boundary_path = out.join(format!("{stem}_boundary.csv"));
    let overlay_path = out.join(format!("{stem}_overlay.ppm"));
    io::write_image(&mask_path, &ex.mask.to_tensor())?;
    io::write_boundary(&boundary_path, &ex.boundary)?;
    let mut curves = Vec::new();
    if let Some(g) = &gt {
        curves.push((g, io::GROUND_TRUTH_COLOR));
    }
    curves.push((&ex.boundary, io::PREDICTION_COLOR));
    io::write_overlay(&overlay_path, &image, &curves)?;
    Ok(Prediction {
        mask: mask_path,
        boundary: boundary_path,
        overlay: overlay_path,
        curve: ex.boundary,
        mae: score,
    })
}

/// The per-op suite, plus whole-network checks of `cfg.model` in eval and
/// train mode when `network` is set.
pub fn cmd_gradcheck(cfg: &RunConfig, network: bool) -> Result<Vec<OpCheck>> {
    cfg.model.validate()?;
    let suite = SuiteConfig {
        seed: cfg.seed,
        ..SuiteConfig::default()
    };
    let mut checks = gradcheck::op_suite(&suite)?;
    if network {
        for mode in [Mode::Eval, Mode::Train] {
            checks.push(gradcheck::check_network(&cfg.model, mode, &suite)?);
        }
    }
    Ok(checks)
}
