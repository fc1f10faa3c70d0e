//! Parameterized building blocks shared by the model components.

use rand::Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Group count for a channel width: the largest divisor of `channels` that
/// is at most 8 and leaves at least four channels per group.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels / 4).max(1)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], -limit, limit, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(p.get(self.weight))?.add_row(p.get(self.bias))
    }
}

/// Two hidden ReLU layers of width `hidden`, then a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            layers: vec![
                Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng),
                Linear::new(store, &format!("{name}.1"), hidden, hidden, rng),
                Linear::new(store, &format!("{name}.2"), hidden, out_dim, rng),
            ],
        }
    }

    pub fn output(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, mut x: Var<'g>) -> Result<Var<'g>> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x)?;
            if i < last {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// He-normal weights, zero bias. `k` must be odd; padding keeps the size at stride 1.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Conv {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[c_out, c_in, k, k], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(p.get(self.weight), Some(p.get(self.bias)), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: norm_groups(channels),
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.group_norm(self.groups, p.get(self.gamma), p.get(self.beta), NORM_EPS)
    }
}

/// 3x3 convolution, group norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv: Conv,
    norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBlock {
            conv: Conv::new(store, &format!("{name}.conv"), c_in, c_out, 3, stride, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), c_out),
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.norm.forward(p, self.conv.forward(p, x)?)?.relu())
    }
}
