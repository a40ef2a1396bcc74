//! The network: a four-stage residual encoder, the attention-augmented
//! context encoder at the bottleneck, and a skip-connected decoder that
//! restores the input resolution.

pub mod checkpoint;
mod config;
pub mod layers;
mod params;

pub(crate) use config::{parse_f64, parse_u64, parse_usize};
pub use config::{ModelConfig, DOWNSAMPLINGS};
pub use layers::{Ctx, Mode, NormUpdate};
pub use params::{Buffer, BufferId, Param, ParamId, ParamKind, ParamStore};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Real, Tensor};

use layers::{ContextModule, Conv, DecoderBlock, EncoderBlock};

#[derive(Debug, Clone)]
pub struct CaceNet<T: Real = f64> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoders: Vec<EncoderBlock>,
    context: ContextModule,
    /// Deepest first.
    decoders: Vec<DecoderBlock>,
    head: Conv,
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput<T> {
    /// Per-pixel foreground probability, `n x 1 x h x w`.
    pub probabilities: Var,
    pub logits: Var,
    /// Output of each encoder stage, shallowest first.
    pub encoder: Vec<Var>,
    pub context: Var,
    pub updates: Vec<NormUpdate<T>>,
}

impl<T: Real> CaceNet<T> {
    /// Builds the network with freshly initialised parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let widths = config.encoder_widths();
        let mut in_c = config.input_channels;
        let mut encoders = Vec::with_capacity(4);
        for (i, &w) in widths.iter().enumerate() {
            encoders.push(EncoderBlock::new(&mut store, &format!("encoder{}", i + 1), in_c, w));
            in_c = w;
        }
        let context = ContextModule::new(&mut store, "context", &config);
        let b = config.base_width;
        let plan = [
            ("decoder4", config.context_out_channels(), 4 * b),
            ("decoder3", 4 * b, 2 * b),
            ("decoder2", 2 * b, b),
            ("decoder1", b, b),
        ];
        let decoders = plan
            .iter()
            .map(|&(name, i, o)| DecoderBlock::new(&mut store, name, i, o))
            .collect();
        let head = Conv::new(&mut store, "head", ConvSpec::new(b, 1, 1), true);
        Ok(CaceNet {
            config,
            store,
            encoders,
            context,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder_blocks(&self) -> &[EncoderBlock] {
        &self.encoders
    }

    pub fn context_module(&self) -> &ContextModule {
        &self.context
    }

    pub fn decoder_blocks(&self) -> &[DecoderBlock] {
        &self.decoders
    }

    pub fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        if s.c != self.config.input_channels {
            return Err(Error::shape(
                "forward",
                "input channels",
                self.config.input_channels,
                s.c,
            ));
        }
        let f = 1 << DOWNSAMPLINGS;
        if !s.h.is_multiple_of(f) || !s.w.is_multiple_of(f) {
            return Err(Error::invalid(
                "forward",
                format!("input {}x{} is not divisible by {f}", s.h, s.w),
            ));
        }
        Ok(())
    }

    /// Records the full network on `tape`. `vars` must come from
    /// [`ParamStore::bind`] (or `bind_values`) on this network's store.
    pub fn forward_on(&self, tape: &mut Tape<T>, vars: &[Var], images: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        self.check_input(tape.value(images))?;
        let mut ctx = Ctx {
            tape,
            vars,
            store: &self.store,
            mode,
            bn_eps: self.config.bn_eps,
            updates: Vec::new(),
        };
        let mut encoder = Vec::with_capacity(4);
        let mut x = images;
        for e in &self.encoders {
            x = e.forward(&mut ctx, x)?;
            encoder.push(x);
        }
        let context = self.context.forward(&mut ctx, x)?;

        // decoder4..decoder2 add the encoder output of matching resolution;
        // decoder1 returns to full resolution where no encoder output exists.
        let skips = [Some(encoder[2]), Some(encoder[1]), Some(encoder[0]), None];
        let mut y = context;
        for (d, skip) in self.decoders.iter().zip(skips) {
            y = d.forward(&mut ctx, y, skip)?;
        }
        let logits = self.head.forward(&mut ctx, y)?;
        let probabilities = ctx.tape.sigmoid(logits)?;
        Ok(ForwardOutput {
            probabilities,
            logits,
            encoder,
            context,
            updates: ctx.updates,
        })
    }

    /// Eval-mode probabilities for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward_on(&mut tape, &vars, x, Mode::Eval)?;
        Ok(tape.value(out.probabilities).clone())
    }

    /// Folds observed batch statistics into the running estimates:
    /// `r <- (1 - m) r + m s`, with the unbiased variance.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<T>]) {
        let m = T::lit(self.config.bn_momentum);
        let keep = T::one() - m;
        for u in updates {
            let count = u.stats.count;
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let rm = self.store.buffer_mut(u.running_mean);
            for (r, &v) in rm.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * v;
            }
            let rv = self.store.buffer_mut(u.running_var);
            for (r, &v) in rv.data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * v * unbias;
            }
        }
    }
}
