//! Parameterised building blocks shared by the models.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-pixel channel map `[B,C,H,W] -> [B,C_out,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let weight = if zero_init {
            store.add(format!("{prefix}.weight"), Tensor::zeros(&[c_out, c_in]), group)
        } else {
            store.add_uniform(format!("{prefix}.weight"), &[c_out, c_in], c_in, group, rng)
        };
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[c_out]), group);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_1x1(x, w, b)
    }
}

/// Same-padded 3x3 convolution followed by ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ConvRelu {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvRelu {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        // He-uniform bound sqrt(6 / fan_in) for ReLU stacks.
        let fan_in = c_in * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::uniform(&[c_out, c_in, 3, 3], bound, rng),
            ParamGroup::Backbone,
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[c_out]), ParamGroup::Backbone);
        Self { weight, bias, stride }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, b, self.stride)?;
        g.relu(y)
    }
}

/// Dense map over the last axis, `x[.., in] * W[in, out] (+ b[out])`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(path.to_string(), &[d_in, d_out], d_in, group, rng);
        let bias = bias.then(|| store.add(format!("{path}_bias"), Tensor::zeros(&[d_out]), group));
        Self { weight, bias }
    }

    pub fn zeros(store: &mut ParamStore, path: &str, d_in: usize, d_out: usize, group: ParamGroup) -> Self {
        let weight = store.add(path.to_string(), Tensor::zeros(&[d_in, d_out]), group);
        Self { weight, bias: None }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}
