//! Layer descriptors shared by the model modules.
//!
//! A layer knows its parameter names, how to initialize them, how to apply
//! itself on a [`Graph`], and its closed-form parameter and multiply-add
//! counts. Weights live in a [`ParamStore`] keyed by dotted names.

use evseg_autograd::{ConvSpec, Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;

/// Parameter and multiply-add count of one layer at a given input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

impl LayerCost {
    pub fn new(name: impl Into<String>, params: u64, macs: u64) -> Self {
        LayerCost {
            name: name.into(),
            params,
            macs,
        }
    }
}

/// Dense convolution with kernel `[kt, kh, kw]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub kernel: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
    pub spec: ConvSpec,
    /// Initial weight variance times fan-in.
    pub gain: f64,
}

impl Conv {
    /// Stride-1, same-padded spatial kernel `kh x kw` with `kt` temporal taps.
    pub fn new(name: impl Into<String>, kernel: [usize; 3], cin: usize, cout: usize) -> Self {
        Conv {
            name: name.into(),
            kernel,
            cin,
            cout,
            bias: true,
            spec: ConvSpec::same(kernel[1]),
            gain: 1.0,
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, [1, 1, 1], cin, cout)
    }

    pub fn spatial(name: impl Into<String>, k: usize, cin: usize, cout: usize) -> Self {
        Self::new(name, [1, k, k], cin, cout)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.spec = ConvSpec::strided(stride, self.kernel[1] / 2);
        self
    }

    /// He gain, for convs followed by a rectifier or a norm.
    pub fn rectified(self) -> Self {
        self.with_gain(2.0)
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
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

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [kt, kh, kw, self.cin, self.cout]
    }

    /// Normal weights with variance `gain / fan_in`, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = self.kernel.iter().product::<usize>() * self.cin;
        let std = (self.gain / fan_in as f64).sqrt();
        store.insert(self.weight_name(), Tensor::randn(&self.weight_shape(), std, rng));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &self.weight_name())?;
        let b = if self.bias {
            Some(g.param(store, &self.bias_name())?)
        } else {
            None
        };
        Ok(g.conv(x, w, b, self.spec)?)
    }

    pub fn params(&self) -> u64 {
        let w: usize = self.weight_shape().iter().product();
        (w + if self.bias { self.cout } else { 0 }) as u64
    }

    /// Output spatial size for an `h x w` input.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let [_, kh, kw] = self.kernel;
        let ConvSpec { stride, padding } = self.spec;
        (
            (h + 2 * padding - kh) / stride + 1,
            (w + 2 * padding - kw) / stride + 1,
        )
    }

    /// Cost on `frames` frames of `h x w` input.
    pub fn cost(&self, frames: usize, h: usize, w: usize) -> LayerCost {
        let (ho, wo) = self.out_hw(h, w);
        let per_out = self.kernel.iter().product::<usize>() * self.cin;
        let macs = (frames * ho * wo * per_out * self.cout) as u64;
        LayerCost::new(&self.name, self.params(), macs)
    }
}

/// Same-padded `k x k` depthwise convolution with bias.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub name: String,
    pub k: usize,
    pub channels: usize,
}

impl Depthwise {
    pub fn new(name: impl Into<String>, k: usize, channels: usize) -> Self {
        Depthwise {
            name: name.into(),
            k,
            channels,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = (1.0 / (self.k * self.k) as f64).sqrt();
        store.insert(
            self.weight_name(),
            Tensor::randn(&[self.k, self.k, self.channels], std, rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.channels]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        Ok(g.depthwise(x, w, Some(b))?)
    }

    pub fn params(&self) -> u64 {
        ((self.k * self.k + 1) * self.channels) as u64
    }

    pub fn cost(&self, frames: usize, h: usize, w: usize) -> LayerCost {
        let macs = (frames * h * w * self.k * self.k * self.channels) as u64;
        LayerCost::new(&self.name, self.params(), macs)
    }
}

/// Per-channel normalization over spatial positions with learned scale and
/// shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl Norm {
    pub fn new(name: impl Into<String>, channels: usize, eps: f64) -> Self {
        Norm {
            name: name.into(),
            channels,
            eps,
        }
    }

    pub fn scale_name(&self) -> String {
        format!("{}.scale", self.name)
    }

    pub fn shift_name(&self) -> String {
        format!("{}.shift", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.scale_name(), Tensor::full(&[self.channels], 1.0));
        store.insert(self.shift_name(), Tensor::zeros(&[self.channels]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n = g.instance_norm(x, self.eps)?;
        let s = g.param(store, &self.scale_name())?;
        let b = g.param(store, &self.shift_name())?;
        let n = g.mul_channel(n, s)?;
        Ok(g.add_channel(n, b)?)
    }

    pub fn params(&self) -> u64 {
        2 * self.channels as u64
    }

    pub fn cost(&self) -> LayerCost {
        LayerCost::new(&self.name, self.params(), 0)
    }
}

/// Lifts `[H,W,C]` to `[1,H,W,C]`; rank-4 input passes through.
pub fn as_frames(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() == 3 {
        let mut s = vec![1];
        s.extend_from_slice(&shape);
        Ok(g.reshape(x, &s)?)
    } else {
        Ok(x)
    }
}
