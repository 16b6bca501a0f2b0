//! Four-stage convolutional pyramid with a multi-scale mixer.
//!
//! Stage outputs sit at 1/4, 1/8, 1/16 and 1/32 of the input. The mixer
//! projects each stage to the common width, upsamples it (nearest) to 1/4,
//! concatenates and fuses back to the common width.

use evseg_autograd::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{as_frames, Conv, LayerCost, Norm};

/// Spatial divisor of the coarsest stage.
pub const MAX_STRIDE: usize = 32;
/// Spatial divisor of the mixed output.
pub const OUT_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
    /// Common width `C` of the mixed output.
    pub out_channels: usize,
    pub norm_eps: f64,
}

impl EncoderConfig {
    pub fn image(out_channels: usize) -> Self {
        EncoderConfig {
            in_channels: 3,
            widths: [16, 32, 64, 128],
            out_channels,
            norm_eps: 1e-5,
        }
    }

    pub fn events(out_channels: usize) -> Self {
        EncoderConfig {
            in_channels: 1,
            widths: [8, 16, 32, 64],
            out_channels,
            norm_eps: 1e-5,
        }
    }
}

/// `conv -> norm -> relu`. The conv has no bias since the norm removes it.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, eps: f64) -> Self {
        ConvBlock {
            conv: Conv::spatial(format!("{name}.conv"), 3, cin, cout)
                .with_stride(stride)
                .rectified()
                .without_bias(),
            norm: Norm::new(format!("{name}.norm"), cout, eps),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        self.norm.init(store);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.norm.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
    pub stages: Vec<[ConvBlock; 2]>,
    pub proj: Vec<Conv>,
    pub fuse: Conv,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: EncoderConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.out_channels == 0 || cfg.widths.contains(&0) {
            return Err(Error::Config(format!("encoder {prefix}: zero width in {cfg:?}")));
        }
        let eps = cfg.norm_eps;
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.in_channels;
        for (i, &width) in cfg.widths.iter().enumerate() {
            let name = format!("{prefix}.stage{}", i + 1);
            // The first stage halves twice to land on 1/4 scale.
            let second_stride = if i == 0 { 2 } else { 1 };
            stages.push([
                ConvBlock::new(&format!("{name}.block1"), cin, width, 2, eps),
                ConvBlock::new(&format!("{name}.block2"), width, width, second_stride, eps),
            ]);
            cin = width;
        }
        let c = cfg.out_channels;
        let proj = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Conv::pointwise(format!("{prefix}.mixer.proj{}", i + 1), w, c))
            .collect();
        let fuse = Conv::pointwise(format!("{prefix}.mixer.fuse"), 4 * c, c);
        Ok(Encoder {
            cfg,
            prefix: prefix.to_string(),
            stages,
            proj,
            fuse,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for stage in &self.stages {
            for block in stage {
                block.init(store, rng);
            }
        }
        for p in &self.proj {
            p.init(store, rng);
        }
        self.fuse.init(store, rng);
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w, c) = match shape {
            [h, w, c] | [_, h, w, c] => (*h, *w, *c),
            _ => {
                return Err(Error::Shape(format!(
                    "{}: expected [H,W,C] or [T,H,W,C], got {shape:?}",
                    self.prefix
                )))
            }
        };
        if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "{}: spatial size {h}x{w} must be a positive multiple of {MAX_STRIDE}",
                self.prefix
            )));
        }
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {c}",
                self.prefix, self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Runs one stage on `[T,H,W,C]` features.
    pub fn stage(&self, g: &mut Graph, store: &ParamStore, i: usize, x: NodeId) -> Result<NodeId> {
        let [b1, b2] = &self.stages[i];
        let y = b1.forward(g, store, x)?;
        b2.forward(g, store, y)
    }

    /// Stage features at 1/4 .. 1/32 scale.
    pub fn pyramid(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<Vec<NodeId>> {
        self.check_input(g.shape(x))?;
        let mut cur = as_frames(g, x)?;
        let mut out = Vec::with_capacity(4);
        for i in 0..self.stages.len() {
            cur = self.stage(g, store, i, cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Fuses four `[T,h_i,w_i,c_i]` stage features into `[T,h_0,w_0,C]`.
    pub fn mix_scales(&self, g: &mut Graph, store: &ParamStore, stages: &[NodeId]) -> Result<NodeId> {
        if stages.len() != 4 {
            return Err(Error::Shape(format!("mixer needs 4 stages, got {}", stages.len())));
        }
        let base = g.shape(stages[0]).to_vec();
        if base.len() != 4 {
            return Err(Error::Shape(format!("stage 1 has shape {base:?}")));
        }
        let mut parts = Vec::with_capacity(4);
        for (i, (&s, proj)) in stages.iter().zip(&self.proj).enumerate() {
            let factor = 1 << i;
            let shape = g.shape(s);
            let expected = [base[0], base[1] / factor, base[2] / factor, self.cfg.widths[i]];
            if shape != expected || !base[1].is_multiple_of(factor) || !base[2].is_multiple_of(factor) {
                return Err(Error::Shape(format!(
                    "stage {} has shape {shape:?}, expected {expected:?}",
                    i + 1
                )));
            }
            let p = proj.forward(g, store, s)?;
            parts.push(if factor > 1 {
                g.upsample_nearest(p, factor)?
            } else {
                p
            });
        }
        let cat = g.concat_channels(&parts)?;
        self.fuse.forward(g, store, cat)
    }

    /// `[T,H,W,Cin]` to `[T,H/4,W/4,C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let stages = self.pyramid(g, store, x)?;
        self.mix_scales(g, store, &stages)
    }

    /// Encodes a single `[H,W,Cin]` frame (or a `[T,H,W,Cin]` stack) without
    /// recording gradients; output rank follows the input.
    pub fn encode(&self, store: &ParamStore, frame: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(frame.clone());
        let y = self.forward(&mut g, store, x)?;
        let out = g.value(y).clone();
        if frame.rank() == 3 {
            let s = out.shape()[1..].to_vec();
            Ok(out.reshape(&s)?)
        } else {
            Ok(out)
        }
    }

    pub fn costs(&self, frames: usize, h: usize, w: usize) -> Vec<LayerCost> {
        let mut out = Vec::new();
        let (mut ch, mut cw) = (h, w);
        let mut sizes = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                out.push(block.conv.cost(frames, ch, cw));
                (ch, cw) = block.conv.out_hw(ch, cw);
                out.push(block.norm.cost());
            }
            sizes.push((ch, cw));
        }
        for (p, &(sh, sw)) in self.proj.iter().zip(&sizes) {
            out.push(p.cost(frames, sh, sw));
        }
        out.push(self.fuse.cost(frames, sizes[0].0, sizes[0].1));
        out
    }
}
