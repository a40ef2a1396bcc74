use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// What a parameter is, which decides its initialisation and whether the
/// optimiser decays it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered store of every named tensor in a network.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamStore<T> {
    pub(crate) fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    /// Normal weights with standard deviation `sqrt(2 / fan_in)`.
    pub(crate) fn weight(&mut self, name: String, shape: Shape, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_, _, _, _| T::lit(normal.sample(rng)));
        self.push(name, ParamKind::Weight, t)
    }

    pub(crate) fn bias(&mut self, name: String, len: usize) -> ParamId {
        self.push(name, ParamKind::Bias, Tensor::zeros(Shape::new(len, 1, 1, 1)))
    }

    pub(crate) fn norm(&mut self, prefix: &str, channels: usize) -> (ParamId, ParamId, BufferId, BufferId) {
        let s = Shape::new(channels, 1, 1, 1);
        let g = self.push(
            format!("{prefix}.gamma"),
            ParamKind::NormScale,
            Tensor::full(s, T::one()),
        );
        let b = self.push(format!("{prefix}.beta"), ParamKind::NormShift, Tensor::zeros(s));
        self.buffers.push(Buffer {
            name: format!("{prefix}.running_mean"),
            value: Tensor::zeros(s),
        });
        let rm = BufferId(self.buffers.len() - 1);
        self.buffers.push(Buffer {
            name: format!("{prefix}.running_var"),
            value: Tensor::full(s, T::one()),
        });
        (g, b, rm, BufferId(self.buffers.len() - 1))
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Records every parameter from externally supplied values, in store order.
    pub fn bind_values(&self, tape: &mut Tape<T>, values: &[Tensor<T>]) -> Vec<Var> {
        assert_eq!(values.len(), self.params.len());
        values.iter().map(|v| tape.param(v.clone())).collect()
    }
}
