//! Motion extraction: per-frame event features, a temporal convolution
//! block for long-term motion, and their concatenation-projection.
//!
//! Temporal kernels read frames `t` and `t+1` (the next older frame, since
//! index 0 is the current frame) with replicate padding at the sequence end.

use std::fmt;
use std::str::FromStr;

use evseg_autograd::{Graph, NodeId, PairPool, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv, LayerCost};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Two-frame temporal mean per pixel.
    #[default]
    Temporal,
    /// Two-frame mean over all pixels, broadcast back over the frame.
    GlobalBroadcast,
}

impl PoolMode {
    fn pair_pool(self) -> PairPool {
        match self {
            PoolMode::Temporal => PairPool::Temporal,
            PoolMode::GlobalBroadcast => PairPool::GlobalBroadcast,
        }
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(PoolMode::Temporal),
            "global_broadcast" => Ok(PoolMode::GlobalBroadcast),
            other => Err(Error::Config(format!(
                "unknown pool mode {other:?} (expected temporal or global_broadcast)"
            ))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Temporal => "temporal",
            PoolMode::GlobalBroadcast => "global_broadcast",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemConfig {
    /// Event encoder layout; its output width is the motion width `C`.
    pub encoder: EncoderConfig,
    /// Width inside the temporal block.
    pub hidden: usize,
    /// Expected number of frames (`l + 1`).
    pub frames: usize,
    pub pool_mode: PoolMode,
}

impl MemConfig {
    pub fn new(channels: usize, frames: usize) -> Self {
        MemConfig {
            encoder: EncoderConfig::events(channels),
            hidden: (channels / 2).max(1),
            frames,
            pool_mode: PoolMode::Temporal,
        }
    }

    pub fn channels(&self) -> usize {
        self.encoder.out_channels
    }
}

/// Short-term, long-term and fused motion features, each `[T,H',W',C]`.
#[derive(Clone, Copy, Debug)]
pub struct MotionFeatures {
    pub short: NodeId,
    pub long: NodeId,
    pub fused: NodeId,
}

#[derive(Clone, Debug)]
pub struct MotionExtractor {
    pub cfg: MemConfig,
    pub encoder: Encoder,
    /// `tau[0]`: C to hidden; `tau[1]`: hidden to hidden; `tau[2]`: hidden
    /// to C before the skip; `tau[3]`: C to C after pooling.
    pub tau: [Conv; 4],
    pub f1: Conv,
    pub f2: Conv,
    /// Projection of the concatenated short/long features, 2C to C.
    pub fuse: Conv,
}

impl MotionExtractor {
    pub fn new(prefix: &str, cfg: MemConfig) -> Result<Self> {
        if cfg.frames == 0 || cfg.hidden == 0 {
            return Err(Error::Config(format!("{prefix}: frames and hidden must be positive")));
        }
        let c = cfg.channels();
        let hd = cfg.hidden;
        let encoder = Encoder::new(&format!("{prefix}.event_encoder"), cfg.encoder.clone())?;
        let tau = [
            Conv::pointwise(format!("{prefix}.tau1"), c, hd),
            Conv::pointwise(format!("{prefix}.tau2"), hd, hd),
            Conv::pointwise(format!("{prefix}.tau3"), hd, c),
            Conv::pointwise(format!("{prefix}.tau4"), c, c),
        ];
        Ok(MotionExtractor {
            encoder,
            tau,
            f1: Conv::new(format!("{prefix}.f1"), [2, 3, 3], hd, hd),
            f2: Conv::new(format!("{prefix}.f2"), [1, 3, 3], hd, hd),
            fuse: Conv::pointwise(format!("{prefix}.fuse"), 2 * c, c),
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.encoder.init(store, rng);
        for t in &self.tau {
            t.init(store, rng);
        }
        self.f1.init(store, rng);
        self.f2.init(store, rng);
        self.fuse.init(store, rng);
    }

    /// `[T,H,W,1]` event frames to `[T,H/4,W/4,C]`.
    pub fn encode_events(&self, g: &mut Graph, store: &ParamStore, events: NodeId) -> Result<NodeId> {
        let shape = g.shape(events);
        if shape.len() != 4 || shape[0] != self.cfg.frames {
            return Err(Error::Shape(format!(
                "event frames {shape:?}: expected {} frames of [H,W,1]",
                self.cfg.frames
            )));
        }
        self.encoder.forward(g, store, events)
    }

    /// Long-term motion `relu(tau4(pool(tau3(f2(tau2(f1(tau1(F_E)))))) + F_E))`.
    pub fn temporal_conv_block(&self, g: &mut Graph, store: &ParamStore, f_e: NodeId) -> Result<NodeId> {
        let shape = g.shape(f_e).to_vec();
        if shape.len() != 4 || shape[0] < 2 {
            return Err(Error::Shape(format!(
                "temporal block needs at least 2 frames of [H,W,C], got {shape:?}"
            )));
        }
        let [tau1, tau2, tau3, tau4] = &self.tau;
        let y = tau1.forward(g, store, f_e)?;
        let y = self.f1.forward(g, store, y)?;
        let y = tau2.forward(g, store, y)?;
        let y = self.f2.forward(g, store, y)?;
        let y = tau3.forward(g, store, y)?;
        let y = g.add(y, f_e)?;
        let y = g.pair_pool(y, self.cfg.pool_mode.pair_pool())?;
        let y = tau4.forward(g, store, y)?;
        Ok(g.relu(y))
    }

    /// `tau(F_E ++ F_M)` over the channel axis.
    pub fn fuse_motion(&self, g: &mut Graph, store: &ParamStore, f_e: NodeId, f_m: NodeId) -> Result<NodeId> {
        if g.shape(f_e) != g.shape(f_m) {
            return Err(Error::Shape(format!(
                "short {:?} and long {:?} motion features differ",
                g.shape(f_e),
                g.shape(f_m)
            )));
        }
        let cat = g.concat_channels(&[f_e, f_m])?;
        self.fuse.forward(g, store, cat)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, events: NodeId) -> Result<MotionFeatures> {
        let short = self.encode_events(g, store, events)?;
        let long = self.temporal_conv_block(g, store, short)?;
        let fused = self.fuse_motion(g, store, short, long)?;
        Ok(MotionFeatures { short, long, fused })
    }

    /// Costs for `frames` event frames of `h x w` pixels.
    pub fn costs(&self, frames: usize, h: usize, w: usize) -> Vec<LayerCost> {
        let mut out = self.encoder.costs(frames, h, w);
        let (fh, fw) = (h / 4, w / 4);
        for conv in [&self.tau[0], &self.f1, &self.tau[1], &self.f2, &self.tau[2], &self.tau[3], &self.fuse] {
            out.push(conv.cost(frames, fh, fw));
        }
        out
    }
}
