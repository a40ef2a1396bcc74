//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! Operations are recorded in execution order; [`Tape::backward`] walks the
//! record strictly in reverse, accumulating vector-Jacobian products into a
//! gradient slot per node. Gradients reaching a node through several
//! consumers are summed in reverse recording order.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvSpec};
use crate::ops::norm::{self, BatchNormCache, BatchStats};
use crate::ops::{elementwise, loss, pool};
use crate::tensor::{Real, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    TransposedConv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    Concat(Vec<Var>),
    ScaleChannels {
        input: Var,
        scale: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Resize(Var),
    Bce {
        prediction: Var,
        target: Tensor<T>,
        eps: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`, or `None` when `var`
    /// does not influence the loss or was recorded without `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.id].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Which side of every non-smooth point the recorded values fell on:
    /// the sign of each ReLU input and each max-pool argmax, in recording
    /// order. Two evaluations with equal patterns lie in the same smooth
    /// piece of the function.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| (v > T::zero()) as usize)),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, id }
    }

    fn check(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for v in vars {
            if v.tape != self.id {
                return Err(Error::CrossTape {
                    expected: self.id,
                    found: v.tape,
                });
            }
            any |= self.nodes[v.id].requires_grad;
        }
        Ok(any)
    }

    fn opt(bias: Option<Var>) -> Vec<Var> {
        bias.into_iter().collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.check(&[a, b])?;
        let out = elementwise::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.check(&[a, b])?;
        let out = elementwise::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Sum of all elements as a `1x1x1x1` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let rg = self.check(&[x])?;
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let rg = self.check(&[x])?;
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        Ok(self.push(out, Op::Mean(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let rg = self.check(&[x])?;
        let out = elementwise::relu(self.value(x));
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let rg = self.check(&[x])?;
        let out = elementwise::sigmoid(self.value(x));
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let mut ins = vec![input, weight];
        ins.extend(Self::opt(bias));
        let rg = self.check(&ins)?;
        let out = conv::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    pub fn transposed_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let mut ins = vec![input, weight];
        ins.extend(Self::opt(bias));
        let rg = self.check(&ins)?;
        let out = conv::transposed_conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        Ok(self.push(
            out,
            Op::TransposedConv {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let rg = self.check(&[input])?;
        let (out, argmax) = pool::maxpool2d(self.value(input), window, stride)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let rg = self.check(&[input])?;
        let out = pool::global_avg_pool(self.value(input));
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    /// Train-mode batch normalisation; also returns the batch statistics so
    /// the caller can update running estimates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let rg = self.check(&[input, gamma, beta])?;
        let (out, cache, stats) = norm::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        );
        Ok((var, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let rg = self.check(&[input, gamma, beta])?;
        let (out, cache) = norm::batch_norm_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let rg = self.check(parts)?;
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = elementwise::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn scale_channels(&mut self, input: Var, scale: Var) -> Result<Var> {
        let rg = self.check(&[input, scale])?;
        let out = elementwise::scale_channels(self.value(input), self.value(scale))?;
        Ok(self.push(out, Op::ScaleChannels { input, scale }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let mut ins = vec![input, weight];
        ins.extend(Self::opt(bias));
        let rg = self.check(&ins)?;
        let out = elementwise::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn bilinear_upsample(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let rg = self.check(&[input])?;
        let out = pool::bilinear_resize(self.value(input), h, w)?;
        Ok(self.push(out, Op::Resize(input), rg))
    }

    /// Mean binary cross-entropy of `prediction` against a fixed binary target.
    pub fn bce_loss(&mut self, prediction: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let rg = self.check(&[prediction])?;
        let value = loss::bce(self.value(prediction), target, eps)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::Bce {
                prediction,
                target: target.clone(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Does not modify the tape, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(&[loss])?;
        let ls = self.value(loss).shape();
        if ls != Shape::new(1, 1, 1, 1) {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {ls}"),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.id].requires_grad {
                return;
            }
            match &mut grads[v.id] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |gv, y| gv * y).expect("mul grad"));
                acc(*b, g.zip_map(va, |gv, x| gv * x).expect("mul grad"));
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(self.value(*x).shape(), g.data()[0]));
            }
            Op::Mean(x) => {
                let s = self.value(*x).shape();
                acc(*x, Tensor::full(s, g.data()[0] / T::lit(s.numel() as f64)));
            }
            Op::Relu(x) => acc(*x, elementwise::relu_backward(self.value(*x), g)),
            Op::Sigmoid(x) => acc(*x, elementwise::sigmoid_backward(&node.value, g)),
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let (gi, gw, gb) = conv::conv2d_backward(self.value(*input), self.value(*weight), g, spec);
                acc(*input, gi);
                acc(*weight, gw);
                if let Some(b) = bias {
                    let shape = self.value(*b).shape();
                    acc(*b, gb.reshape(shape).expect("bias grad"));
                }
            }
            Op::TransposedConv {
                input,
                weight,
                bias,
                spec,
            } => {
                let (gi, gw, gb) = conv::transposed_conv2d_backward(self.value(*input), self.value(*weight), g, spec);
                acc(*input, gi);
                acc(*weight, gw);
                if let Some(b) = bias {
                    let shape = self.value(*b).shape();
                    acc(*b, gb.reshape(shape).expect("bias grad"));
                }
            }
            Op::MaxPool { input, argmax } => {
                acc(*input, pool::maxpool2d_backward(self.value(*input).shape(), argmax, g));
            }
            Op::GlobalAvgPool(x) => acc(*x, pool::global_avg_pool_backward(self.value(*x).shape(), g)),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = norm::batch_norm_backward(cache, self.value(*gamma), g);
                acc(*input, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).shape().c;
                    acc(*p, g.slice_channels(start, c).expect("concat grad"));
                    start += c;
                }
            }
            Op::ScaleChannels { input, scale } => {
                let (gx, gs) = elementwise::scale_channels_backward(self.value(*input), self.value(*scale), g);
                acc(*input, gx);
                acc(*scale, gs);
            }
            Op::Linear { input, weight, bias } => {
                let (gx, gw, gb) = elementwise::linear_backward(self.value(*input), self.value(*weight), g);
                acc(*input, gx);
                acc(*weight, gw);
                if let Some(b) = bias {
                    let shape = self.value(*b).shape();
                    acc(*b, gb.reshape(shape).expect("bias grad"));
                }
            }
            Op::Resize(x) => acc(*x, pool::bilinear_resize_backward(self.value(*x).shape(), g)),
            Op::Bce {
                prediction,
                target,
                eps,
            } => {
                acc(
                    *prediction,
                    loss::bce_backward(self.value(*prediction), target, *eps, g.data()[0]),
                );
            }
        }
    }
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Parameter tensors larger than this are checked on a seeded random
    /// subset of this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
    /// Skip coordinates whose perturbation crosses a ReLU kink or changes a
    /// max-pool argmax; skipped coordinates are counted in the report.
    pub skip_kinks: bool,
    pub stencil: Stencil,
}

/// Central difference formula used by [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(p + ε) - f(p - ε)) / 2ε`, error `O(ε²)`.
    #[default]
    ThreePoint,
    /// `(f(p - 2ε) - 8 f(p - ε) + 8 f(p + ε) - f(p + 2ε)) / 12ε`, error `O(ε⁴)`.
    FivePoint,
}

impl Stencil {
    /// `(offset in units of ε, weight)` pairs; the sum is divided by `ε`.
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::ThreePoint => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FivePoint => &[
                (-2.0, 1.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (2.0, -1.0 / 12.0),
            ],
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_coords: 200,
            seed: 0,
            skip_kinks: false,
            stencil: Stencil::ThreePoint,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

/// One checked coordinate: parameter index, flat index, analytic and
/// numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordCheck {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub coords: Vec<CoordCheck>,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences (see [`Stencil`]).
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a scalar variable.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(&mut f, params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let base_pattern = if cfg.skip_kinks {
        tape.kink_pattern()
    } else {
        Vec::new()
    };
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    let mut total_skipped = 0;
    let mut checked = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() > cfg.max_coords {
            let mut c = sample(&mut rng, p.len(), cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..p.len()).collect()
        };
        let mut worst: Option<(usize, f64, f64)> = None;
        let mut max_err: f64 = 0.0;
        let mut skipped = 0;
        for &i in &coords {
            let orig = p.data()[i];
            let mut numeric = 0.0;
            let mut crossed = false;
            for &(k, weight) in cfg.stencil.taps() {
                work[pi].data_mut()[i] = orig + k * cfg.epsilon;
                let (t, _, o) = eval(&mut f, &work)?;
                numeric += weight * t.value(o).data()[0];
                crossed |= cfg.skip_kinks && t.kink_pattern() != base_pattern;
            }
            work[pi].data_mut()[i] = orig;
            if crossed {
                skipped += 1;
                continue;
            }

            let numeric = numeric / cfg.epsilon;
            let a = analytic[pi].data()[i];
            checked.push(CoordCheck {
                param: pi,
                index: i,
                analytic: a,
                numeric,
            });
            let err = relative_error(a, numeric);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((i, a, numeric));
            }
        }
        overall = overall.max(max_err);
        total_skipped += skipped;
        reports.push(ParamCheck {
            index: pi,
            coords_checked: coords.len() - skipped,
            skipped,
            max_rel_error: max_err,
            worst,
        });
    }
    Ok(GradCheckReport {
        params: reports,
        coords: checked,
        skipped: total_skipped,
        max_rel_error: overall,
        tolerance: cfg.tolerance,
        passed: overall <= cfg.tolerance,
    })
}
