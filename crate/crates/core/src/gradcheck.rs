//! Finite-difference checks of every differentiable op and of a whole
//! network, as run by the `gradcheck` command and the test suites.
//!
//! Each op instance is reduced to a scalar as `sum(op(x) * r)` with a fixed
//! random `r`, so every output coordinate contributes to the gradient.
//! Inputs to ReLU and max-pooling are drawn away from kinks and ties.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, GradCheckConfig, GradCheckReport, Stencil, Tape, Var};
use crate::error::Result;
use crate::model::{CaceNet, Mode, ModelConfig};
use crate::ops::ConvSpec;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    /// Random instances per op.
    pub instances: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Tolerance for graphs with train-mode batch normalisation.
    pub batch_norm_tolerance: f64,
    pub max_coords: usize,
    /// Step of the five-point stencil used for whole-network checks.
    pub network_epsilon: f64,
    pub network_batch: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 20,
            seed: 0,
            epsilon: 1e-5,
            tolerance: 1e-4,
            batch_norm_tolerance: 1e-3,
            max_coords: 200,
            network_epsilon: 1e-2,
            network_batch: 4,
        }
    }
}

/// Outcome for one op (or network) over all of its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub instances: usize,
    pub coords: usize,
    /// Coordinates whose perturbation crossed a ReLU kink or max-pool tie.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One random instance: parameter values and the op applied to them.
struct Instance {
    params: Vec<Tensor<f64>>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let mut v: Vec<f64> = (0..shape.numel()).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).expect("matching length")
}

fn dims(rng: &mut ChaCha8Rng, max_hw: usize) -> Shape {
    Shape::new(
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=max_hw),
        rng.random_range(1..=max_hw),
    )
}

fn instance(params: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance {
        params,
        build: Box::new(build),
    }
}

/// `sum(out * r)` with `r` regenerated from `seed` on every call.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape();
    let r = uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, -1.0, 1.0);
    let r = tape.constant(r);
    let y = tape.mul(out, r)?;
    tape.sum(y)
}

fn random_conv(rng: &mut ChaCha8Rng) -> (ConvSpec, usize, usize) {
    loop {
        let k = [1, 2, 3][rng.random_range(0..3)];
        let spec = ConvSpec::new(rng.random_range(1..=3), rng.random_range(1..=3), k)
            .stride(rng.random_range(1..=2))
            .padding(rng.random_range(0..=2))
            .dilation(rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=7), rng.random_range(1..=7));
        if spec.validate("gradcheck").is_ok() && spec.conv_output_hw(h, w).is_some() {
            return (spec, h, w);
        }
    }
}

fn random_transposed(rng: &mut ChaCha8Rng) -> (ConvSpec, usize, usize) {
    loop {
        let s = rng.random_range(1..=2);
        let spec = ConvSpec::new(
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        )
        .stride(s)
        .padding(rng.random_range(0..=1))
        .dilation(rng.random_range(1..=2))
        .output_padding(rng.random_range(0..s));
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        if spec.validate("gradcheck").is_ok() && spec.transposed_output_hw(h, w).is_some() {
            return (spec, h, w);
        }
    }
}

fn conv_instance(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (spec, h, w) = random_conv(rng);
    let n = rng.random_range(1..=2);
    let x = uniform(rng, Shape::new(n, spec.in_channels, h, w), -1.0, 1.0);
    let wt = uniform(
        rng,
        Shape::new(spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1),
        -1.0,
        1.0,
    );
    let b = uniform(rng, Shape::new(1, spec.out_channels, 1, 1), -1.0, 1.0);
    instance(vec![x, wt, b], move |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
        project(t, y, seed)
    })
}

fn transposed_instance(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (spec, h, w) = random_transposed(rng);
    let n = rng.random_range(1..=2);
    let x = uniform(rng, Shape::new(n, spec.in_channels, h, w), -1.0, 1.0);
    let wt = uniform(
        rng,
        Shape::new(spec.in_channels, spec.out_channels, spec.kernel.0, spec.kernel.1),
        -1.0,
        1.0,
    );
    let b = uniform(rng, Shape::new(1, spec.out_channels, 1, 1), -1.0, 1.0);
    instance(vec![x, wt, b], move |t, v| {
        let y = t.transposed_conv2d(v[0], v[1], Some(v[2]), spec)?;
        project(t, y, seed)
    })
}

fn maxpool_instance(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let k = rng.random_range(1..=3);
    let s = rng.random_range(1..=3);
    let mut shape = dims(rng, 7);
    shape.h = shape.h.max(k);
    shape.w = shape.w.max(k);
    let x = distinct(rng, shape);
    instance(vec![x], move |t, v| {
        let y = t.maxpool2d(v[0], (k, k), (s, s))?;
        project(t, y, seed)
    })
}

fn batch_norm_instance(rng: &mut ChaCha8Rng, seed: u64, train: bool) -> Instance {
    let mut shape = dims(rng, 4);
    if shape.n * shape.h * shape.w < 2 {
        shape.w = 2;
    }
    let c = shape.c;
    let x = uniform(rng, shape, -2.0, 2.0);
    let gamma = uniform(rng, Shape::new(1, c, 1, 1), 0.5, 1.5);
    let beta = uniform(rng, Shape::new(1, c, 1, 1), -0.5, 0.5);
    if train {
        instance(vec![x, gamma, beta], move |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        })
    } else {
        let mean = uniform(rng, Shape::new(1, c, 1, 1), -0.5, 0.5);
        let var = uniform(rng, Shape::new(1, c, 1, 1), 0.5, 2.0);
        instance(vec![x, gamma, beta], move |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(t, y, seed)
        })
    }
}

fn attention_instance(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let c = rng.random_range(2..=6);
    let hidden = rng.random_range(1..=c);
    let mut shape = dims(rng, 4);
    shape.c = c;
    let x = uniform(rng, shape, -1.0, 1.0);
    let w1 = uniform(rng, Shape::new(hidden, c, 1, 1), -1.0, 1.0);
    let b1 = away_from_zero(rng, Shape::new(1, hidden, 1, 1));
    let w2 = uniform(rng, Shape::new(c, hidden, 1, 1), -1.0, 1.0);
    let b2 = uniform(rng, Shape::new(1, c, 1, 1), -1.0, 1.0);
    instance(vec![x, w1, b1, w2, b2], move |t, v| {
        let z = t.global_avg_pool(v[0])?;
        let h = t.linear(z, v[1], Some(v[2]))?;
        let h = t.relu(h)?;
        let e = t.linear(h, v[3], Some(v[4]))?;
        let s = t.sigmoid(e)?;
        let y = t.scale_channels(v[0], s)?;
        project(t, y, seed)
    })
}

fn chain_instance(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let spec = ConvSpec::new(2, 3, 3).padding(1);
    let x = uniform(rng, Shape::new(1, 2, 6, 6), -1.0, 1.0);
    let wt = uniform(rng, Shape::new(3, 2, 3, 3), -1.0, 1.0);
    let b = uniform(rng, Shape::new(1, 3, 1, 1), -1.0, 1.0);
    instance(vec![x, wt, b], move |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
        let y = t.relu(y)?;
        let y = t.maxpool2d(y, (2, 2), (2, 2))?;
        project(t, y, seed)
    })
}

/// Builds instance `i` of the named op.
fn make(op: &str, rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    match op {
        "add" | "mul" => {
            let shape = dims(rng, 5);
            let a = uniform(rng, shape, -1.0, 1.0);
            let b = uniform(rng, shape, -1.0, 1.0);
            let mul = op == "mul";
            instance(vec![a, b], move |t, v| {
                let y = if mul { t.mul(v[0], v[1])? } else { t.add(v[0], v[1])? };
                project(t, y, seed)
            })
        }
        "sum" | "mean" => {
            let shape = dims(rng, 5);
            let x = uniform(rng, shape, -1.0, 1.0);
            let mean = op == "mean";
            instance(vec![x], move |t, v| {
                let y = if mean { t.mean(v[0])? } else { t.sum(v[0])? };
                project(t, y, seed)
            })
        }
        "relu" => {
            let shape = dims(rng, 5);
            let x = away_from_zero(rng, shape);
            instance(vec![x], move |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, seed)
            })
        }
        "sigmoid" => {
            let shape = dims(rng, 5);
            let x = uniform(rng, shape, -4.0, 4.0);
            instance(vec![x], move |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, seed)
            })
        }
        "conv2d" => conv_instance(rng, seed),
        "transposed_conv2d" => transposed_instance(rng, seed),
        "maxpool2d" => maxpool_instance(rng, seed),
        "global_avg_pool" => {
            let shape = dims(rng, 5);
            let x = uniform(rng, shape, -1.0, 1.0);
            instance(vec![x], move |t, v| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, seed)
            })
        }
        "batch_norm_train" => batch_norm_instance(rng, seed, true),
        "batch_norm_eval" => batch_norm_instance(rng, seed, false),
        "concat_channels" => {
            let base = dims(rng, 4);
            let parts: Vec<Tensor<f64>> = (0..rng.random_range(2..=3))
                .map(|_| {
                    let c = rng.random_range(1..=3);
                    uniform(rng, Shape::new(base.n, c, base.h, base.w), -1.0, 1.0)
                })
                .collect();
            instance(parts, move |t, v| {
                let y = t.concat_channels(v)?;
                project(t, y, seed)
            })
        }
        "scale_channels" => {
            let shape = dims(rng, 5);
            let x = uniform(rng, shape, -1.0, 1.0);
            let s = uniform(rng, Shape::new(shape.n, shape.c, 1, 1), 0.0, 1.0);
            instance(vec![x, s], move |t, v| {
                let y = t.scale_channels(v[0], v[1])?;
                project(t, y, seed)
            })
        }
        "linear" => {
            let (n, i, o) = (
                rng.random_range(1..=3),
                rng.random_range(1..=6),
                rng.random_range(1..=6),
            );
            let x = uniform(rng, Shape::new(n, i, 1, 1), -1.0, 1.0);
            let w = uniform(rng, Shape::new(o, i, 1, 1), -1.0, 1.0);
            let b = uniform(rng, Shape::new(1, o, 1, 1), -1.0, 1.0);
            instance(vec![x, w, b], move |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, seed)
            })
        }
        "bilinear_upsample" => {
            let shape = dims(rng, 4);
            let x = uniform(rng, shape, -1.0, 1.0);
            let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
            instance(vec![x], move |t, v| {
                let y = t.bilinear_upsample(v[0], h, w)?;
                project(t, y, seed)
            })
        }
        "bce_loss" => {
            let shape = dims(rng, 5);
            let p = uniform(rng, shape, 0.05, 0.95);
            let y = Tensor::from_fn(shape, |_, _, _, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
            instance(vec![p], move |t, v| t.bce_loss(v[0], &y, 1e-7))
        }
        "channel_attention" => attention_instance(rng, seed),
        "conv_relu_maxpool" => chain_instance(rng, seed),
        other => unreachable!("unknown gradcheck op {other}"),
    }
}

/// Names of the per-op checks, in run order.
pub const OPS: &[&str] = &[
    "add",
    "mul",
    "sum",
    "mean",
    "relu",
    "sigmoid",
    "conv2d",
    "transposed_conv2d",
    "maxpool2d",
    "global_avg_pool",
    "batch_norm_train",
    "batch_norm_eval",
    "concat_channels",
    "scale_channels",
    "linear",
    "bilinear_upsample",
    "bce_loss",
    "channel_attention",
    "conv_relu_maxpool",
];

fn fd_config(cfg: &SuiteConfig, tolerance: f64, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        epsilon: cfg.epsilon,
        tolerance,
        max_coords: cfg.max_coords,
        seed,
        skip_kinks: false,
        stencil: Stencil::ThreePoint,
    }
}

/// Checks `cfg.instances` random instances of one op.
pub fn check_op(op: &str, cfg: &SuiteConfig) -> Result<OpCheck> {
    let index = OPS.iter().position(|&o| o == op).unwrap_or(OPS.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let tolerance = if op == "batch_norm_train" {
        cfg.batch_norm_tolerance
    } else {
        cfg.tolerance
    };
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut skipped = 0;
    for i in 0..cfg.instances {
        let seed = rng.random::<u64>();
        let inst = make(op, &mut rng, seed);
        let report = finite_diff_check(
            |t, v| (inst.build)(t, v),
            &inst.params,
            fd_config(cfg, tolerance, i as u64),
        )?;
        worst = worst.max(report.max_rel_error);
        coords += report.params.iter().map(|p| p.coords_checked).sum::<usize>();
        skipped += report.skipped;
    }
    Ok(OpCheck {
        name: op.to_string(),
        instances: cfg.instances,
        coords,
        skipped,
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

pub fn op_suite(cfg: &SuiteConfig) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|op| check_op(op, cfg)).collect()
}

/// Whole-network finite-difference report: a freshly initialised net on a
/// random batch, reduced by BCE against a random binary mask. Coordinates
/// whose perturbation crosses a ReLU kink or max-pool tie are skipped.
///
/// In eval mode the running statistics are first set to the statistics of
/// the batch itself, so activations are normalised as in a trained network.
pub fn network_report(model: &ModelConfig, mode: Mode, cfg: &SuiteConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let (h, w) = model.input_size;
    let batch = cfg.network_batch;
    let x = uniform(&mut rng, Shape::new(batch, model.input_channels, h, w), 0.0, 1.0);
    let y = Tensor::from_fn(
        Shape::new(batch, 1, h, w),
        |_, _, _, _| {
            if rng.random::<bool>() {
                1.0
            } else {
                0.0
            }
        },
    );
    let net = match mode {
        Mode::Train => CaceNet::<f64>::new(model.clone(), cfg.seed)?,
        Mode::Eval => {
            let calibrated = ModelConfig {
                bn_momentum: 1.0,
                ..model.clone()
            };
            let mut net = CaceNet::<f64>::new(calibrated, cfg.seed)?;
            let mut tape = Tape::new();
            let vars = net.store().bind(&mut tape);
            let xv = tape.constant(x.clone());
            let out = net.forward_on(&mut tape, &vars, xv, Mode::Train)?;
            net.apply_norm_updates(&out.updates);
            net
        }
    };
    let params: Vec<Tensor<f64>> = net.store().params().iter().map(|p| p.value.clone()).collect();
    let tolerance = match mode {
        Mode::Train => cfg.batch_norm_tolerance,
        Mode::Eval => cfg.tolerance,
    };
    finite_diff_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let out = net.forward_on(t, v, xv, mode)?;
            t.bce_loss(out.probabilities, &y, 1e-7)
        },
        &params,
        GradCheckConfig {
            epsilon: cfg.network_epsilon,
            skip_kinks: true,
            stencil: Stencil::FivePoint,
            ..fd_config(cfg, tolerance, cfg.seed)
        },
    )
}

pub fn check_network(model: &ModelConfig, mode: Mode, cfg: &SuiteConfig) -> Result<OpCheck> {
    let report = network_report(model, mode, cfg)?;
    Ok(network_summary(model, mode, cfg, &report))
}

pub fn network_summary(model: &ModelConfig, mode: Mode, cfg: &SuiteConfig, report: &GradCheckReport) -> OpCheck {
    let (h, w) = model.input_size;
    OpCheck {
        name: format!(
            "{} {h}x{w} b{} r{} n{} {}",
            model.method_name(),
            model.base_width,
            model.reduction_ratio,
            cfg.network_batch,
            match mode {
                Mode::Train => "train",
                Mode::Eval => "eval",
            }
        ),
        instances: 1,
        coords: report.coords.len(),
        skipped: report.skipped,
        max_rel_error: report.max_rel_error,
        tolerance: report.tolerance,
        passed: report.passed,
    }
}

/// Fixed-width pass/fail table.
pub struct CheckTable<'a>(pub &'a [OpCheck]);

impl fmt::Display for CheckTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>9} {:>8} {:>8} {:>13} {:>9}  status",
            "op", "instances", "coords", "skipped", "max_rel_error", "tolerance"
        )?;
        for c in self.0 {
            writeln!(
                f,
                "{:<32} {:>9} {:>8} {:>8} {:>13.3e} {:>9.0e}  {}",
                c.name,
                c.instances,
                c.coords,
                c.skipped,
                c.max_rel_error,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_instances() {
        let cfg = SuiteConfig {
            instances: 3,
            ..SuiteConfig::default()
        };
        for c in op_suite(&cfg).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn table_lists_status() {
        let c = OpCheck {
            name: "relu".into(),
            instances: 2,
            coords: 10,
            skipped: 0,
            max_rel_error: 2e-5,
            tolerance: 1e-4,
            passed: false,
        };
        let s = CheckTable(&[c]).to_string();
        assert!(s.lines().nth(1).unwrap().starts_with("relu"));
        assert!(s.contains("FAIL"));
    }
}
