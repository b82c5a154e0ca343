use mmvt_tensor::{Element, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter, which fixes its initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    PosEmbed,
    Cls,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<E> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<E: Element> ParamStore<E> {
    pub fn add(&mut self, name: String, kind: ParamKind, value: Tensor<E>) -> ParamId {
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<E>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf; the returned vector
    /// is indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone().with_grad())).collect()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Normal(0, std) truncated to ±2·std by rejection.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Default initializer: truncated normal weights and CLS tokens, zero
/// biases and position embeddings, unit norm scales.
pub fn init_value<E: Element>(kind: ParamKind, dims: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<E> {
    match kind {
        ParamKind::Weight | ParamKind::Cls => {
            Tensor::from_fn(dims.to_vec(), |_| E::from_f64(truncated_normal(rng, std)))
        }
        ParamKind::NormScale => Tensor::full(dims.to_vec(), E::one()),
        ParamKind::Bias | ParamKind::NormShift | ParamKind::PosEmbed => Tensor::zeros(dims.to_vec()),
    }
}
