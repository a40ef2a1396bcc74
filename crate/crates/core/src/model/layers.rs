//! Building blocks of the network. Each block owns parameter handles into
//! a [`ParamStore`] and records its forward computation on a tape.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::norm::BatchStats;
use crate::ops::ConvSpec;
use crate::tensor::{Real, Shape};

use super::params::{BufferId, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers; running estimates are
    /// reported for update.
    Train,
    /// Running statistics in normalisation layers.
    Eval,
}

/// Batch statistics observed by one normalisation layer.
#[derive(Debug, Clone)]
pub struct NormUpdate<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub stats: BatchStats<T>,
}

/// Forward-pass state shared by all blocks.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    pub bn_eps: f64,
    pub updates: Vec<NormUpdate<T>>,
}

impl<T: Real> Ctx<'_, T> {
    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub transposed: bool,
}

impl Conv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, bias: bool) -> Self {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let weight = store.weight(
            format!("{name}.weight"),
            Shape::new(spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1),
            fan_in,
        );
        let bias = bias.then(|| store.bias(format!("{name}.bias"), spec.out_channels));
        Conv {
            weight,
            bias,
            spec,
            transposed: false,
        }
    }

    /// Weight layout `(in, out, kh, kw)`.
    pub fn transposed<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, bias: bool) -> Self {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let weight = store.weight(
            format!("{name}.weight"),
            Shape::new(spec.in_channels, spec.out_channels, spec.kernel.0, spec.kernel.1),
            fan_in,
        );
        let bias = bias.then(|| store.bias(format!("{name}.bias"), spec.out_channels));
        Conv {
            weight,
            bias,
            spec,
            transposed: true,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        if self.transposed {
            ctx.tape.transposed_conv2d(x, w, b, self.spec)
        } else {
            ctx.tape.conv2d(x, w, b, self.spec)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let (gamma, beta, running_mean, running_var) = store.norm(name, channels);
        Norm {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, ctx.bn_eps)?;
                ctx.updates.push(NormUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                ctx.tape.batch_norm_eval(
                    x,
                    g,
                    b,
                    store.buffer(self.running_mean),
                    store.buffer(self.running_var),
                    ctx.bn_eps,
                )
            }
        }
    }
}

/// Convolution followed by batch normalisation and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub conv: Conv,
    pub norm: Norm,
    pub relu: bool,
}

impl ConvNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, relu: bool) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), spec, false);
        let norm = Norm::new(store, &format!("{name}.bn"), spec.out_channels);
        ConvNorm { conv, norm, relu }
    }

    pub fn transposed<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, relu: bool) -> Self {
        let conv = Conv::transposed(store, &format!("{name}.conv"), spec, false);
        let norm = Norm::new(store, &format!("{name}.bn"), spec.out_channels);
        ConvNorm { conv, norm, relu }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        if self.relu {
            ctx.tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// Residual unit (two 3x3 conv + bn, projection shortcut when the width
/// changes) followed by 2x2 max pooling.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
    pub shortcut: Option<ConvNorm>,
}

impl EncoderBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_c: usize, out_c: usize) -> Self {
        let conv1 = ConvNorm::new(
            store,
            &format!("{name}.unit1"),
            ConvSpec::new(in_c, out_c, 3).same(),
            true,
        );
        let conv2 = ConvNorm::new(
            store,
            &format!("{name}.unit2"),
            ConvSpec::new(out_c, out_c, 3).same(),
            false,
        );
        let shortcut = (in_c != out_c)
            .then(|| ConvNorm::new(store, &format!("{name}.shortcut"), ConvSpec::new(in_c, out_c, 1), false));
        EncoderBlock { conv1, conv2, shortcut }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        let y = ctx.tape.add(y, skip)?;
        let y = ctx.tape.relu(y)?;
        ctx.tape.maxpool2d(y, (2, 2), (2, 2))
    }
}

/// Squeeze-and-excitation channel attention:
/// `z = GAP(F)`, `s = σ(W2 δ(W1 z))`, `out_c = s_c · F_c`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub squeeze_weight: ParamId,
    pub squeeze_bias: ParamId,
    pub excite_weight: ParamId,
    pub excite_bias: ParamId,
}

impl ChannelAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, hidden: usize) -> Self {
        ChannelAttention {
            squeeze_weight: store.weight(
                format!("{name}.squeeze.weight"),
                Shape::new(hidden, channels, 1, 1),
                channels,
            ),
            squeeze_bias: store.bias(format!("{name}.squeeze.bias"), hidden),
            excite_weight: store.weight(
                format!("{name}.excite.weight"),
                Shape::new(channels, hidden, 1, 1),
                hidden,
            ),
            excite_bias: store.bias(format!("{name}.excite.bias"), channels),
        }
    }

    /// The per-channel gate `s`, shape `n x C x 1 x 1`.
    pub fn gate<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let z = ctx.tape.global_avg_pool(f)?;
        let (w1, b1) = (ctx.var(self.squeeze_weight), ctx.var(self.squeeze_bias));
        let (w2, b2) = (ctx.var(self.excite_weight), ctx.var(self.excite_bias));
        let h = ctx.tape.linear(z, w1, Some(b1))?;
        let h = ctx.tape.relu(h)?;
        let e = ctx.tape.linear(h, w2, Some(b2))?;
        ctx.tape.sigmoid(e)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let s = self.gate(ctx, f)?;
        ctx.tape.scale_channels(f, s)
    }
}

/// One dense-atrous branch: a cascade of channel-preserving dilated 3x3
/// convolutions, an optional trailing 1x1, ReLU, then optional attention.
#[derive(Debug, Clone)]
pub struct DacBranch {
    pub convs: Vec<Conv>,
    pub pointwise: Option<Conv>,
    pub attention: Option<ChannelAttention>,
}

impl DacBranch {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(ctx, y)?;
        }
        if let Some(p) = &self.pointwise {
            y = p.forward(ctx, y)?;
        }
        y = ctx.tape.relu(y)?;
        match &self.attention {
            Some(a) => a.forward(ctx, y),
            None => Ok(y),
        }
    }
}

/// Multi-kernel pooling: for each window `k`, max-pool with stride `k`,
/// compress to one channel with a 1x1 convolution, resize bilinearly back,
/// and stack the maps after the input channels.
#[derive(Debug, Clone)]
pub struct Rmp {
    pub windows: Vec<usize>,
    pub convs: Vec<Conv>,
}

impl Rmp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, windows: &[usize]) -> Self {
        let convs = windows
            .iter()
            .enumerate()
            .map(|(i, _)| {
                Conv::new(
                    store,
                    &format!("{name}.pool{}", i + 1),
                    ConvSpec::new(channels, 1, 1),
                    true,
                )
            })
            .collect();
        Rmp {
            windows: windows.to_vec(),
            convs,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.value(x).shape();
        let mut parts = vec![x];
        for (&k, conv) in self.windows.iter().zip(&self.convs) {
            let p = ctx.tape.maxpool2d(x, (k, k), (k, k))?;
            let p = conv.forward(ctx, p)?;
            parts.push(ctx.tape.bilinear_upsample(p, s.h, s.w)?);
        }
        ctx.tape.concat_channels(&parts)
    }
}

/// Context encoder: residual sum of the atrous branches followed by [`Rmp`].
#[derive(Debug, Clone)]
pub struct ContextModule {
    pub branches: Vec<DacBranch>,
    pub rmp: Rmp,
}

impl ContextModule {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &super::ModelConfig) -> Self {
        let c = cfg.bottleneck_channels();
        let last = cfg.dac_dilations.len() - 1;
        let branches = cfg
            .dac_dilations
            .iter()
            .enumerate()
            .map(|(bi, dilations)| {
                let bname = format!("{name}.branch{}", bi + 1);
                let convs = dilations
                    .iter()
                    .enumerate()
                    .map(|(ci, &d)| {
                        Conv::new(
                            store,
                            &format!("{bname}.atrous{}", ci + 1),
                            ConvSpec::new(c, c, 3).dilation(d).same(),
                            true,
                        )
                    })
                    .collect();
                let pointwise = (bi == last && cfg.dac_final_pointwise)
                    .then(|| Conv::new(store, &format!("{bname}.pointwise"), ConvSpec::new(c, c, 1), true));
                let attention = cfg
                    .attention_enabled
                    .then(|| ChannelAttention::new(store, &format!("{bname}.attention"), c, cfg.attention_hidden()));
                DacBranch {
                    convs,
                    pointwise,
                    attention,
                }
            })
            .collect();
        let rmp = Rmp::new(store, &format!("{name}.rmp"), c, &cfg.rmp_windows);
        ContextModule { branches, rmp }
    }

    /// Residual atrous aggregation `x + Σ branch(x)`, before pooling.
    pub fn dac<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut acc = x;
        for b in &self.branches {
            let y = b.forward(ctx, x)?;
            acc = ctx.tape.add(acc, y)?;
        }
        Ok(acc)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.dac(ctx, x)?;
        self.rmp.forward(ctx, y)
    }
}

/// 1x1 reduce, 3x3 stride-2 transposed conv, 1x1 expand (each with
/// bn + relu), then an optional additive skip.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub reduce: ConvNorm,
    pub upsample: ConvNorm,
    pub expand: ConvNorm,
}

impl DecoderBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_c: usize, out_c: usize) -> Self {
        let mid = (out_c / 4).max(1);
        DecoderBlock {
            reduce: ConvNorm::new(store, &format!("{name}.reduce"), ConvSpec::new(in_c, mid, 1), true),
            upsample: ConvNorm::transposed(
                store,
                &format!("{name}.upsample"),
                ConvSpec::new(mid, mid, 3).stride(2).padding(1).output_padding(1),
                true,
            ),
            expand: ConvNorm::new(store, &format!("{name}.expand"), ConvSpec::new(mid, out_c, 1), true),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, skip: Option<Var>) -> Result<Var> {
        let y = self.reduce.forward(ctx, x)?;
        let y = self.upsample.forward(ctx, y)?;
        let y = self.expand.forward(ctx, y)?;
        match skip {
            Some(s) => ctx.tape.add(y, s),
            None => Ok(y),
        }
    }
}
