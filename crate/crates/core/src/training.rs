//! Loss, optimiser, learning-rate schedule and the minibatch training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{CaceNet, Mode, NormUpdate};
use crate::synth::SegmentationSample;
use crate::tensor::{DType, Real, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Iterations between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub bce_epsilon: f64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.001,
            weight_decay: 0.0001,
            poly_power: 0.9,
            max_iter: 1000,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 0,
            bce_epsilon: 1e-7,
            dtype: DType::F64,
        }
    }
}

impl TrainConfig {
    /// `max_iter = 0` is accepted and trains nothing.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return fail(format!("train.lr = {} must be positive", self.initial_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "train.weight_decay = {} must be non-negative",
                self.weight_decay
            ));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return fail(format!("train.poly_power = {} must be non-negative", self.poly_power));
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(self.bce_epsilon > 0.0 && self.bce_epsilon < 0.5) {
            return fail(format!("train.bce_epsilon = {} must lie in (0, 0.5)", self.bce_epsilon));
        }
        Ok(())
    }
}

/// `initial_lr * (1 - iteration / max_iter)^power`.
pub fn poly_lr(iteration: usize, cfg: &TrainConfig) -> Result<f64> {
    if iteration > cfg.max_iter {
        return Err(Error::invalid(
            "poly_lr",
            format!("iteration {iteration} exceeds max_iter {}", cfg.max_iter),
        ));
    }
    if cfg.max_iter == 0 {
        return Ok(cfg.initial_lr);
    }
    let frac = 1.0 - iteration as f64 / cfg.max_iter as f64;
    Ok(cfg.initial_lr * frac.powf(cfg.poly_power))
}

/// In-place `p <- p - lr * (g + weight_decay * p)`.
pub fn sgd_update<T: Real>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, weight_decay: f64) -> Result<()> {
    param.expect_same_shape("sgd_step", grad)?;
    let (lr, wd) = (T::lit(lr), T::lit(weight_decay));
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * (g + wd * *p);
    }
    Ok(())
}

/// Applies [`sgd_update`] to every parameter. `grads[i]` belongs to
/// `params[i]`; a missing gradient is an error.
pub fn sgd_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", "gradient count", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let g = g.ok_or_else(|| Error::invalid("sgd_step", format!("missing gradient for parameter {i}")))?;
        sgd_update(p, g, lr, weight_decay)?;
    }
    Ok(())
}

/// A model the training loop can optimise.
pub trait Objective<T: Real> {
    fn num_samples(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn param_values(&self) -> Vec<&Tensor<T>>;
    fn param_values_mut(&mut self) -> Vec<&mut Tensor<T>>;
    /// Records the minibatch loss. `params` are bound in `param_values` order.
    fn record_loss(&mut self, tape: &mut Tape<T>, params: &[Var], batch: &[usize], bce_epsilon: f64) -> Result<Var>;
    /// Called once after every parameter update.
    fn after_step(&mut self) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub lr: f64,
    pub epoch: usize,
    /// Exponential moving average of the loss (factor 0.1).
    pub loss_ema: Option<f64>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, num_samples: usize) -> Self {
        TrainState {
            iteration: 0,
            lr: cfg.initial_lr,
            epoch: 0,
            loss_ema: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..num_samples).collect(),
            cursor: num_samples,
        }
    }

    /// The next `min(batch_size, n)` indices of a stream of seeded epoch
    /// permutations.
    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let take = batch_size.min(self.order.len());
        let mut batch = Vec::with_capacity(take);
        while batch.len() < take {
            if self.cursor == self.order.len() {
                self.order.sort_unstable();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn grad_report(names: &[String], grads: &Gradients<impl Real>, vars: &[Var]) -> String {
    let mut norms: Vec<(f64, &str)> = names
        .iter()
        .zip(vars)
        .map(|(n, &v)| (grads.get(v).map_or(f64::NAN, Tensor::l2_norm), n.as_str()))
        .collect();
    let total = norms.iter().map(|(n, _)| n * n).sum::<f64>().sqrt();
    norms.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut s = format!("global {total:e}");
    for (n, name) in norms.iter().take(5) {
        let _ = write!(s, ", {name} {n:e}");
    }
    s
}

/// Runs `cfg.max_iter` SGD iterations and returns the per-iteration loss.
/// `on_step` sees every record after the corresponding update.
pub fn fit<T: Real, O: Objective<T>>(
    obj: &mut O,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord, &O) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if obj.num_samples() == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let names = obj.param_names();
    let mut state = TrainState::new(cfg, obj.num_samples());
    let mut history = Vec::with_capacity(cfg.max_iter);
    while state.iteration < cfg.max_iter {
        let lr = poly_lr(state.iteration, cfg)?;
        state.lr = lr;
        let batch = state.next_batch(cfg.batch_size);
        let mut tape = Tape::new();
        let vars: Vec<Var> = obj.param_values().into_iter().map(|p| tape.param(p.clone())).collect();
        let loss_var = obj.record_loss(&mut tape, &vars, &batch, cfg.bce_epsilon)?;
        let loss = tape.value(loss_var).data()[0].as_f64();
        let grads = tape.backward(loss_var)?;
        let grads_finite = vars.iter().all(|&v| grads.get(v).is_none_or(Tensor::is_finite));
        if !loss.is_finite() || !grads_finite {
            return Err(Error::NonFiniteLoss {
                iteration: state.iteration,
                lr,
                grad_norms: grad_report(&names, &grads, &vars),
            });
        }
        let g: Vec<Option<&Tensor<T>>> = vars.iter().map(|&v| grads.get(v)).collect();
        sgd_step(&mut obj.param_values_mut(), &g, lr, cfg.weight_decay)?;
        obj.after_step();
        state.loss_ema = Some(match state.loss_ema {
            Some(e) => 0.9 * e + 0.1 * loss,
            None => loss,
        });
        let record = LossRecord {
            iteration: state.iteration,
            lr,
            loss,
        };
        if state.iteration.is_multiple_of(50) {
            log::info!("iter {} lr {lr:.3e} loss {loss:.5}", state.iteration);
        }
        state.iteration += 1;
        on_step(&record, obj)?;
        history.push(record);
    }
    Ok(history)
}

/// The segmentation objective: mean BCE of the network's probability map.
pub struct Segmentation<'a, T: Real> {
    pub net: &'a mut CaceNet<T>,
    images: Vec<Tensor<T>>,
    masks: Vec<Tensor<T>>,
    pending: Vec<NormUpdate<T>>,
}

impl<'a, T: Real> Segmentation<'a, T> {
    pub fn new(net: &'a mut CaceNet<T>, samples: &[SegmentationSample]) -> Result<Self> {
        let mut images = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let (is, ms) = (s.image.shape(), s.mask.shape());
            if is.n != 1 || ms != Shape::new(1, 1, is.h, is.w) {
                return Err(Error::Data(format!(
                    "sample {i}: expected 1xCxHxW image with a 1x1xHxW mask"
                )));
            }
            if let Some(first) = images.first().map(Tensor::shape) {
                if first != is {
                    return Err(Error::Data(format!("sample {i} has shape {is}, expected {first}")));
                }
            }
            net.check_input(&s.image.cast())?;
            images.push(s.image.cast());
            masks.push(s.mask.cast());
        }
        Ok(Segmentation {
            net,
            images,
            masks,
            pending: Vec::new(),
        })
    }
}

pub fn stack<T: Real>(planes: &[&Tensor<T>]) -> Tensor<T> {
    let s = planes[0].shape();
    let mut data = Vec::with_capacity(s.numel() * planes.len());
    for p in planes {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(Shape::new(planes.len(), s.c, s.h, s.w), data).expect("equal plane shapes")
}

impl<T: Real> Objective<T> for Segmentation<'_, T> {
    fn num_samples(&self) -> usize {
        self.images.len()
    }

    fn param_names(&self) -> Vec<String> {
        self.net.store().params().iter().map(|p| p.name.clone()).collect()
    }

    fn param_values(&self) -> Vec<&Tensor<T>> {
        self.net.store().params().iter().map(|p| &p.value).collect()
    }

    fn param_values_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.net
            .store_mut()
            .params_mut()
            .iter_mut()
            .map(|p| &mut p.value)
            .collect()
    }

    fn record_loss(&mut self, tape: &mut Tape<T>, params: &[Var], batch: &[usize], eps: f64) -> Result<Var> {
        let x = stack(&batch.iter().map(|&i| &self.images[i]).collect::<Vec<_>>());
        let y = stack(&batch.iter().map(|&i| &self.masks[i]).collect::<Vec<_>>());
        let xv = tape.constant(x);
        let out = self.net.forward_on(tape, params, xv, Mode::Train)?;
        self.pending = out.updates;
        tape.bce_loss(out.probabilities, &y, eps)
    }

    fn after_step(&mut self) {
        let updates = std::mem::take(&mut self.pending);
        self.net.apply_norm_updates(&updates);
    }
}

/// Trains `net` on `samples`. `checkpoint(iteration, net)` runs every
/// `cfg.checkpoint_every` iterations, counting completed iterations.
pub fn train<T: Real>(
    net: &mut CaceNet<T>,
    samples: &[SegmentationSample],
    cfg: &TrainConfig,
    mut checkpoint: impl FnMut(usize, &CaceNet<T>) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    let mut obj = Segmentation::new(net, samples)?;
    let every = cfg.checkpoint_every;
    fit(&mut obj, cfg, |rec, o| {
        let done = rec.iteration + 1;
        if every > 0 && done % every == 0 {
            checkpoint(done, o.net)?;
        }
        Ok(())
    })
}

pub const LOSS_HEADER: &str = "iter,lr,loss";

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_HEADER}\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.lr, r.loss);
    }
    s
}
