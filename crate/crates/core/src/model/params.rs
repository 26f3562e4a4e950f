use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Array, Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("model dims must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Shapes of every tensor, in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; TENSOR_COUNT] {
        let (d, v, e, h) = (self.feature_dim, self.vocab_size, self.embed_dim, self.hidden_dim);
        [
            vec![d, h],
            vec![h],
            vec![v, e],
            vec![e + h, h],
            vec![h],
            vec![e + h, h],
            vec![h],
            vec![e + h, h],
            vec![h],
            vec![h, v],
            vec![v],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Bridge,
    Embedding,
    Recurrent,
    Output,
}

pub const TENSOR_COUNT: usize = 11;

pub const TENSOR_NAMES: [&str; TENSOR_COUNT] = [
    "bridge.weight",
    "bridge.bias",
    "embedding",
    "update_gate.weight",
    "update_gate.bias",
    "reset_gate.weight",
    "reset_gate.bias",
    "candidate.weight",
    "candidate.bias",
    "output.weight",
    "output.bias",
];

pub const TENSOR_GROUPS: [ParamGroup; TENSOR_COUNT] = [
    ParamGroup::Bridge,
    ParamGroup::Bridge,
    ParamGroup::Embedding,
    ParamGroup::Recurrent,
    ParamGroup::Recurrent,
    ParamGroup::Recurrent,
    ParamGroup::Recurrent,
    ParamGroup::Recurrent,
    ParamGroup::Recurrent,
    ParamGroup::Output,
    ParamGroup::Output,
];

/// Tensors initialised to zero instead of uniformly.
const ZERO_INIT: [bool; TENSOR_COUNT] = [
    false, false, false, false, true, false, true, false, true, false, false,
];

/// Which parameter groups are excluded from updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenMask {
    pub bridge: bool,
    pub embedding: bool,
    pub recurrent: bool,
    pub output: bool,
}

impl FrozenMask {
    /// Only the bridge is trainable.
    pub fn bridge_only() -> Self {
        Self {
            bridge: false,
            embedding: true,
            recurrent: true,
            output: true,
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Bridge => self.bridge,
            ParamGroup::Embedding => self.embedding,
            ParamGroup::Recurrent => self.recurrent,
            ParamGroup::Output => self.output,
        }
    }
}

/// All learnable weights of the captioner.
///
/// The bridge maps features to the initial hidden state, the embedding and
/// GRU gates form the recurrent decoder, and the output layer projects the
/// hidden state to vocabulary logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerParams {
    pub dims: ModelDims,
    pub seed: u64,
    pub frozen: FrozenMask,
    tensors: Vec<Array>,
}

/// Handles for every tensor on some [`Graph`].
pub struct ParamVars<V> {
    pub bridge_w: V,
    pub bridge_b: V,
    pub embedding: V,
    pub update_w: V,
    pub update_b: V,
    pub reset_w: V,
    pub reset_b: V,
    pub cand_w: V,
    pub cand_b: V,
    pub out_w: V,
    pub out_b: V,
}

impl<V: Clone> ParamVars<V> {
    pub fn as_array(&self) -> [V; TENSOR_COUNT] {
        [
            self.bridge_w.clone(),
            self.bridge_b.clone(),
            self.embedding.clone(),
            self.update_w.clone(),
            self.update_b.clone(),
            self.reset_w.clone(),
            self.reset_b.clone(),
            self.cand_w.clone(),
            self.cand_b.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
        ]
    }
}

impl CaptionerParams {
    /// Uniform init in `[-0.08, 0.08]`, GRU gate biases zero.
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut rng = substream(seed, Stream::Init, 0);
        let tensors = dims
            .shapes()
            .iter()
            .zip(ZERO_INIT)
            .map(|(shape, zero)| {
                let n: usize = shape.iter().product();
                let data = if zero {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE)).collect()
                };
                Array::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims,
            seed,
            frozen: FrozenMask::default(),
            tensors,
        })
    }

    pub fn from_tensors(dims: ModelDims, seed: u64, tensors: Vec<Array>) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != TENSOR_COUNT {
            return Err(Error::Contract(format!(
                "expected {TENSOR_COUNT} tensors, got {}",
                tensors.len()
            )));
        }
        for ((t, shape), name) in tensors.iter().zip(dims.shapes()).zip(TENSOR_NAMES) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            dims,
            seed,
            frozen: FrozenMask::default(),
            tensors,
        })
    }

    pub fn tensors(&self) -> &[Array] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Array> {
        TENSOR_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array> {
        TENSOR_NAMES
            .iter()
            .position(|n| *n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Array::len).sum()
    }

    /// Registers every tensor as a graph input.
    pub fn vars<'a, G: Graph<'a>>(&'a self, g: &mut G) -> ParamVars<G::Var> {
        let t = &self.tensors;
        ParamVars {
            bridge_w: g.input(&t[0]),
            bridge_b: g.input(&t[1]),
            embedding: g.input(&t[2]),
            update_w: g.input(&t[3]),
            update_b: g.input(&t[4]),
            reset_w: g.input(&t[5]),
            reset_b: g.input(&t[6]),
            cand_w: g.input(&t[7]),
            cand_b: g.input(&t[8]),
            out_w: g.input(&t[9]),
            out_b: g.input(&t[10]),
        }
    }

    /// `w <- w - lr * g` on every unfrozen tensor; frozen groups are left
    /// bit-identical.
    pub fn sgd_update(&mut self, grads: &ParamGrads, learning_rate: f64) -> Result<()> {
        let frozen = self.frozen;
        let mut weights = Vec::new();
        let mut gs = Vec::new();
        if grads.tensors.len() != TENSOR_COUNT {
            return Err(Error::Contract("gradient tensor count mismatch".into()));
        }
        for ((w, g), group) in self.tensors.iter_mut().zip(&grads.tensors).zip(TENSOR_GROUPS) {
            if !frozen.is_frozen(group) {
                weights.push(w);
                gs.push(g);
            } else if !w.same_shape(g) {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match weight shape {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
        }
        sgd_step(&mut weights, &gs, learning_rate)
    }
}

/// Gradients for every tensor of [`CaptionerParams`], same order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Array>,
}

impl ParamGrads {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            tensors: dims.shapes().iter().map(|s| Array::zeros(s)).collect(),
        }
    }

    /// Collects leaf adjoints for `vars` from a backward pass.
    pub fn from_tape(grads: &Gradients, vars: &ParamVars<NodeId>, dims: &ModelDims) -> Self {
        let shapes = dims.shapes();
        Self {
            tensors: vars
                .as_array()
                .iter()
                .zip(shapes.iter())
                .map(|(id, shape)| grads.get_or_zeros(*id, shape))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, factor: f64) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, factor)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Array::all_finite)
    }
}
