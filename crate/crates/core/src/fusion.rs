//! Motion fusion: channel attention queried by motion features, followed by
//! a spatial gate computed from pooled image and motion maps.
//!
//! Both layers act per frame on `[T,H,W,C]` inputs (a rank-3 `[H,W,C]`
//! input is treated as one frame).

use std::fmt;
use std::str::FromStr;

use evseg_autograd::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{as_frames, Conv, Depthwise, LayerCost};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    ChannelOnly,
    SpatialOnly,
    SpatialThenChannel,
    Parallel,
    #[default]
    ChannelThenSpatial,
}

impl Arrangement {
    pub const ALL: [Arrangement; 5] = [
        Arrangement::ChannelOnly,
        Arrangement::SpatialOnly,
        Arrangement::SpatialThenChannel,
        Arrangement::Parallel,
        Arrangement::ChannelThenSpatial,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Arrangement::ChannelOnly => "channel_only",
            Arrangement::SpatialOnly => "spatial_only",
            Arrangement::SpatialThenChannel => "spatial_then_channel",
            Arrangement::Parallel => "parallel",
            Arrangement::ChannelThenSpatial => "channel_then_spatial",
        }
    }

    fn uses_channel(self) -> bool {
        self != Arrangement::SpatialOnly
    }

    fn uses_spatial(self) -> bool {
        self != Arrangement::ChannelOnly
    }
}

impl FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" | "channel_only" => Ok(Arrangement::ChannelOnly),
            "spatial" | "spatial_only" => Ok(Arrangement::SpatialOnly),
            "spatial_then_channel" => Ok(Arrangement::SpatialThenChannel),
            "parallel" => Ok(Arrangement::Parallel),
            "channel_then_spatial" => Ok(Arrangement::ChannelThenSpatial),
            other => Err(Error::Config(format!("unknown fusion arrangement {other:?}"))),
        }
    }
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Which index of the channel-affinity matrix the softmax normalizes over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// For every output (query) channel, weights over key channels sum to 1.
    /// The attention matrix is `softmax_rows(Q^T K / alpha)`, `[C_q, C_k]`,
    /// and the output is `V A^T`.
    #[default]
    Keys,
    /// Softmax over the last axis of `K Q / alpha`, `[C_k, C_q]`, with
    /// output `V A`.
    Queries,
}

impl FromStr for SoftmaxAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keys" => Ok(SoftmaxAxis::Keys),
            "queries" => Ok(SoftmaxAxis::Queries),
            other => Err(Error::Config(format!(
                "unknown softmax axis {other:?} (expected keys or queries)"
            ))),
        }
    }
}

impl fmt::Display for SoftmaxAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoftmaxAxis::Keys => "keys",
            SoftmaxAxis::Queries => "queries",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub channels: usize,
    pub arrangement: Arrangement,
    /// Adds the image features back onto the channel-attention output.
    pub residual: bool,
    pub softmax_axis: SoftmaxAxis,
    pub init_temperature: f64,
}

impl FusionConfig {
    pub fn new(channels: usize) -> Self {
        FusionConfig {
            channels,
            arrangement: Arrangement::default(),
            residual: true,
            softmax_axis: SoftmaxAxis::default(),
            init_temperature: 16.0,
        }
    }
}

fn check_pair(g: &Graph, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb || !(3..=4).contains(&sa.len()) {
        return Err(Error::Shape(format!(
            "{what}: image features {sa:?} and motion features {sb:?} must match"
        )));
    }
    Ok(())
}

/// Intermediate nodes of one channel-attention application.
#[derive(Clone, Debug)]
pub struct ChannelAttentionTrace {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    /// Per-frame `[C, C]` attention matrices (rows sum to 1).
    pub attention: Vec<NodeId>,
    /// Attention output before the residual, `[T,H,W,C]`.
    pub attended: NodeId,
    pub out: NodeId,
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub prefix: String,
    pub channels: usize,
    pub f3_image: Depthwise,
    pub f4_image: Depthwise,
    pub f3_motion: Depthwise,
    pub f4_motion: Depthwise,
    pub wq: Conv,
    pub wk: Conv,
    pub wv: Conv,
    pub residual: bool,
    pub axis: SoftmaxAxis,
    pub init_temperature: f64,
}

impl ChannelAttention {
    pub fn new(prefix: &str, cfg: &FusionConfig) -> Self {
        let c = cfg.channels;
        ChannelAttention {
            prefix: prefix.to_string(),
            channels: c,
            f3_image: Depthwise::new(format!("{prefix}.f3_image"), 3, c),
            f4_image: Depthwise::new(format!("{prefix}.f4_image"), 5, c),
            f3_motion: Depthwise::new(format!("{prefix}.f3_motion"), 3, c),
            f4_motion: Depthwise::new(format!("{prefix}.f4_motion"), 5, c),
            wq: Conv::pointwise(format!("{prefix}.wq"), 2 * c, c),
            wk: Conv::pointwise(format!("{prefix}.wk"), 2 * c, c),
            wv: Conv::pointwise(format!("{prefix}.wv"), 2 * c, c),
            residual: cfg.residual,
            axis: cfg.softmax_axis,
            init_temperature: cfg.init_temperature,
        }
    }

    /// Name of the unconstrained scalar whose exponential is the temperature.
    pub fn log_temperature_name(&self) -> String {
        format!("{}.log_temperature", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for d in [&self.f3_image, &self.f4_image, &self.f3_motion, &self.f4_motion] {
            d.init(store, rng);
        }
        for c in [&self.wq, &self.wk, &self.wv] {
            c.init(store, rng);
        }
        store.insert(
            self.log_temperature_name(),
            Tensor::scalar(self.init_temperature.ln()),
        );
    }

    fn two_branch(&self, g: &mut Graph, store: &ParamStore, x: NodeId, f3: &Depthwise, f4: &Depthwise) -> Result<NodeId> {
        let a = f3.forward(g, store, x)?;
        let b = f4.forward(g, store, x)?;
        Ok(g.concat_channels(&[a, b])?)
    }

    pub fn trace(&self, g: &mut Graph, store: &ParamStore, f_i: NodeId, f_m: NodeId) -> Result<ChannelAttentionTrace> {
        check_pair(g, f_i, f_m, "channel attention")?;
        let f_i = as_frames(g, f_i)?;
        let f_m = as_frames(g, f_m)?;
        let [t, h, w, c] = [g.shape(f_i)[0], g.shape(f_i)[1], g.shape(f_i)[2], g.shape(f_i)[3]];
        if c != self.channels {
            return Err(Error::Shape(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let motion = self.two_branch(g, store, f_m, &self.f3_motion, &self.f4_motion)?;
        let image = self.two_branch(g, store, f_i, &self.f3_image, &self.f4_image)?;
        let q = self.wq.forward(g, store, motion)?;
        let k = self.wk.forward(g, store, image)?;
        let v = self.wv.forward(g, store, image)?;
        let log_t = g.param(store, &self.log_temperature_name())?;
        let alpha = g.exp(log_t);

        let mut attention = Vec::with_capacity(t);
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let mut flat = |n: NodeId| -> Result<NodeId> {
                let f = g.select_frame(n, ti)?;
                Ok(g.reshape(f, &[h * w, c])?)
            };
            let (qt, kt, vt) = (flat(q)?, flat(k)?, flat(v)?);
            let (logits, v_transposed) = match self.axis {
                SoftmaxAxis::Keys => (g.matmul(qt, kt, true, false)?, true),
                SoftmaxAxis::Queries => (g.matmul(kt, qt, true, false)?, false),
            };
            let logits = g.div_scalar(logits, alpha)?;
            let a = g.softmax_rows(logits)?;
            let o = g.matmul(vt, a, false, v_transposed)?;
            attention.push(a);
            frames.push(g.reshape(o, &[h, w, c])?);
        }
        let attended = g.stack(&frames)?;
        let out = if self.residual {
            g.add(attended, f_i)?
        } else {
            attended
        };
        Ok(ChannelAttentionTrace {
            q,
            k,
            v,
            attention,
            attended,
            out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_i: NodeId, f_m: NodeId) -> Result<NodeId> {
        Ok(self.trace(g, store, f_i, f_m)?.out)
    }

    pub fn costs(&self, frames: usize, h: usize, w: usize) -> Vec<LayerCost> {
        let c = self.channels;
        let mut out: Vec<LayerCost> = [&self.f3_image, &self.f4_image, &self.f3_motion, &self.f4_motion]
            .iter()
            .map(|d| d.cost(frames, h, w))
            .collect();
        for conv in [&self.wq, &self.wk, &self.wv] {
            out.push(conv.cost(frames, h, w));
        }
        // Affinity Q^T K and the product with V, each HW * C * C per frame.
        let attn_macs = (2 * frames * h * w * c * c) as u64;
        out.push(LayerCost::new(format!("{}.attention", self.prefix), 1, attn_macs));
        out
    }
}

/// Intermediate nodes of one spatial-attention application.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionTrace {
    /// `[T,H,W,4]`: max and mean of the image features, then of the motion
    /// features.
    pub pooled: NodeId,
    /// `[T,H,W,1]` gate in `(0, 1)`.
    pub gate: NodeId,
    pub out: NodeId,
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn new(prefix: &str) -> Self {
        SpatialAttention {
            conv: Conv::spatial(format!("{prefix}.conv"), 7, 4, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
    }

    pub fn trace(&self, g: &mut Graph, store: &ParamStore, f_i: NodeId, f_m: NodeId) -> Result<SpatialAttentionTrace> {
        let (si, sm) = (g.shape(f_i).to_vec(), g.shape(f_m).to_vec());
        if si.len() != sm.len() || si.len() < 3 || si[..si.len() - 1] != sm[..sm.len() - 1] {
            return Err(Error::Shape(format!(
                "spatial attention: image features {si:?} and motion features {sm:?} differ spatially"
            )));
        }
        let f_i = as_frames(g, f_i)?;
        let f_m = as_frames(g, f_m)?;
        let maps = [
            g.channel_max(f_i)?,
            g.channel_mean(f_i)?,
            g.channel_max(f_m)?,
            g.channel_mean(f_m)?,
        ];
        let pooled = g.concat_channels(&maps)?;
        let logits = self.conv.forward(g, store, pooled)?;
        let gate = g.sigmoid(logits);
        let out = g.gate(f_i, gate)?;
        Ok(SpatialAttentionTrace { pooled, gate, out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_i: NodeId, f_m: NodeId) -> Result<NodeId> {
        Ok(self.trace(g, store, f_i, f_m)?.out)
    }

    pub fn costs(&self, frames: usize, h: usize, w: usize) -> Vec<LayerCost> {
        vec![self.conv.cost(frames, h, w)]
    }
}

#[derive(Clone, Debug)]
pub struct MotionFusion {
    pub arrangement: Arrangement,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl MotionFusion {
    pub fn new(prefix: &str, cfg: &FusionConfig) -> Self {
        MotionFusion {
            arrangement: cfg.arrangement,
            channel: ChannelAttention::new(&format!("{prefix}.channel"), cfg),
            spatial: SpatialAttention::new(&format!("{prefix}.spatial")),
        }
    }

    /// Only the layers the arrangement uses receive parameters.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        if self.arrangement.uses_channel() {
            self.channel.init(store, rng);
        }
        if self.arrangement.uses_spatial() {
            self.spatial.init(store, rng);
        }
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, f_i: NodeId, f_m: NodeId) -> Result<NodeId> {
        check_pair(g, f_i, f_m, "fusion")?;
        let f_i = as_frames(g, f_i)?;
        let f_m = as_frames(g, f_m)?;
        let (ca, sa) = (&self.channel, &self.spatial);
        match self.arrangement {
            Arrangement::ChannelOnly => ca.forward(g, store, f_i, f_m),
            Arrangement::SpatialOnly => sa.forward(g, store, f_i, f_m),
            Arrangement::ChannelThenSpatial => {
                let x = ca.forward(g, store, f_i, f_m)?;
                sa.forward(g, store, x, f_m)
            }
            Arrangement::SpatialThenChannel => {
                let x = sa.forward(g, store, f_i, f_m)?;
                ca.forward(g, store, x, f_m)
            }
            Arrangement::Parallel => {
                let a = ca.forward(g, store, f_i, f_m)?;
                let b = sa.forward(g, store, f_i, f_m)?;
                let s = g.add(a, b)?;
                Ok(g.scale(s, 0.5))
            }
        }
    }

    pub fn costs(&self, frames: usize, h: usize, w: usize) -> Vec<LayerCost> {
        let mut out = Vec::new();
        if self.arrangement.uses_channel() {
            out.extend(self.channel.costs(frames, h, w));
        }
        if self.arrangement.uses_spatial() {
            out.extend(self.spatial.costs(frames, h, w));
        }
        out
    }
}
