//! Named parameter storage, the forward-pass session that binds parameters
//! into a tape, and the SGD optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trainable parameters and non-trainable buffers (batch-norm running
/// statistics), keyed by dotted names such as `decoder.cem1.low.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Sub-store with every parameter and buffer whose name starts with
    /// `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.params.values_mut() {
            t.data_mut().fill(value);
        }
    }
}

/// Kaiming-normal initialisation for a conv weight of shape `[Cout, Cin, k, k]`.
pub fn kaiming_normal(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running estimates are collected.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// One forward pass: a fresh tape plus the parameters bound into it.
///
/// A parameter is bound once per session, so using the same network twice
/// (full-size and downscaled inputs) accumulates into one gradient.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            mode,
            bn_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let v = self.graph.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub(crate) fn record_batch_stats(&mut self, prefix: &str, stats: BatchStats) {
        self.bn_stats.push((prefix.to_string(), stats));
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats)] {
        &self.bn_stats
    }

    /// Gradients for every bound parameter; parameters the objective does
    /// not reach get explicit zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Folds the batch statistics gathered during a training forward pass into
/// the running estimates.
pub fn apply_batch_stats(store: &mut ParamStore, stats: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, s) in stats {
        let mean = store.buffer_mut(&format!("{prefix}.running_mean"))?;
        for (r, m) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let var = store.buffer_mut(&format!("{prefix}.running_var"))?;
        for (r, v) in var.data_mut().iter_mut().zip(&s.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
    Ok(())
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay
/// (decay added to the gradient before the momentum update).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) {
        self.velocity = velocity;
    }

    /// Updates the parameters named in `grads` (others are untouched).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = store.param_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::shape(format!("gradient for {name} has wrong shape")));
            }
            let mut g: Vec<f64> = grad
                .data()
                .iter()
                .zip(param.data())
                .map(|(g, p)| g + self.weight_decay * p)
                .collect();
            if self.momentum != 0.0 {
                match self.velocity.get_mut(name) {
                    Some(v) => {
                        for (vv, gg) in v.data_mut().iter_mut().zip(g.iter_mut()) {
                            *vv = self.momentum * *vv + *gg;
                            *gg = *vv;
                        }
                    }
                    None => {
                        let v = Tensor::from_vec(param.shape(), g.clone())?;
                        self.velocity.insert(name.clone(), v);
                    }
                }
            }
            for (p, gg) in param.data_mut().iter_mut().zip(&g) {
                *p -= lr * gg;
            }
        }
        Ok(())
    }
}
