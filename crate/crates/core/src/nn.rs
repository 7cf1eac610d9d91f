//! Layer building blocks registered in a [`ParamStore`].

use alloc::format;
use alloc::string::String;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::ops::ConvGeom;
use crate::params::{he_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvOptions {
    pub geom: ConvGeom,
    pub bias: bool,
    pub trainable: bool,
    /// Multiplier on the He-uniform bound.
    pub gain: f64,
}

impl ConvOptions {
    pub fn new(geom: ConvGeom) -> Self {
        ConvOptions { geom, bias: true, trainable: true, gain: 1.0 }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        opts: ConvOptions,
    ) -> Self {
        let k = opts.geom.kernel;
        let fan_in = in_channels * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(rng, &[out_channels, in_channels, k, k], fan_in, opts.gain),
            opts.trainable,
        );
        let bias = opts
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), opts.trainable));
        Conv2d { weight, bias, geom: opts.geom, in_channels, out_channels }
    }

    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }
}

/// Inference-only batch normalization with stored statistics, as used by
/// pretrained backbones. Its four tensors are never trainable.
#[derive(Clone, Debug)]
pub struct FrozenBatchNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl FrozenBatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let mut add = |suffix: &str, v: f64| {
            let n: String = format!("{name}.{suffix}");
            store.add(n, Tensor::full(&[channels], T::lit(v)), false)
        };
        FrozenBatchNorm {
            weight: add("weight", 1.0),
            bias: add("bias", 0.0),
            running_mean: add("running_mean", 0.0),
            running_var: add("running_var", 1.0),
            eps: 1e-5,
        }
    }

    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.value(self.weight).data();
        let b = store.value(self.bias).data();
        let m = store.value(self.running_mean).data();
        let v = store.value(self.running_var).data();
        let eps = T::lit(self.eps);
        let scale: alloc::vec::Vec<T> = w.iter().zip(v).map(|(&w, &v)| w / (v + eps).sqrt()).collect();
        let shift: alloc::vec::Vec<T> = b.iter().zip(m).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
        g.channel_affine(x, scale, &shift)
    }
}
