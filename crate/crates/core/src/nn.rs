//! Convolution and batch-norm layers. Layers only hold names and sizes;
//! their weights live in a [`ParamStore`].

use rand::Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{kaiming_normal, Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        store.insert_param(self.weight_name(), kaiming_normal(shape, rng));
        if self.bias {
            store.insert_param(self.bias_name(), Tensor::vector(vec![0.0; self.out_channels]));
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = if self.bias {
            Some(s.param(&self.bias_name())?)
        } else {
            None
        };
        s.graph.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        store.insert_param(format!("{}.gamma", self.name), Tensor::vector(vec![1.0; c]));
        store.insert_param(format!("{}.beta", self.name), Tensor::vector(vec![0.0; c]));
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::vector(vec![0.0; c]));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::vector(vec![1.0; c]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(&format!("{}.gamma", self.name))?;
        let beta = s.param(&format!("{}.beta", self.name))?;
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, gamma, beta, BN_EPS)?;
                s.record_batch_stats(&self.name, stats);
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store();
                let mean = store.buffer(&format!("{}.running_mean", self.name))?.data();
                let var = store.buffer(&format!("{}.running_var", self.name))?.data();
                s.graph.channel_affine(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct Bconv {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Bconv {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Bconv {
            conv: Conv2d::new(format!("{name}.conv"), in_channels, out_channels, kernel).without_bias(),
            bn: BatchNorm2d::new(format!("{name}.bn"), out_channels),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        self.bn.init(store);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}
