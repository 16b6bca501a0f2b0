//! Full segmentation network: image encoder, optional motion branch and
//! fusion, temporal decoder.

use std::fmt;
use std::str::FromStr;

use evseg_autograd::{Graph, NodeId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::decoder::{predict_mask, DecoderConfig, TemporalDecoder};
use crate::encoder::{Encoder, EncoderConfig, MAX_STRIDE, OUT_STRIDE};
use crate::error::{Error, Result};
use crate::fusion::{Arrangement, FusionConfig, MotionFusion, SoftmaxAxis};
use crate::metrics::{SegMask, IGNORE_INDEX};
use crate::motion::{MemConfig, MotionExtractor, MotionFeatures, PoolMode};
use crate::nn::LayerCost;

/// Whether and how motion features are fused into the image features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionArm {
    /// Image-only model; no event branch at all.
    NoFusion,
    Fused(Arrangement),
}

impl Default for FusionArm {
    fn default() -> Self {
        FusionArm::Fused(Arrangement::default())
    }
}

impl FromStr for FusionArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_fusion" | "none" => Ok(FusionArm::NoFusion),
            other => Ok(FusionArm::Fused(other.parse()?)),
        }
    }
}

impl fmt::Display for FusionArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionArm::NoFusion => f.write_str("no_fusion"),
            FusionArm::Fused(a) => a.fmt(f),
        }
    }
}

impl Serialize for FusionArm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FusionArm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Declared input size, used for cost reporting and validation.
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Common feature width `C`.
    pub channels: usize,
    /// Number of reference frames `l`.
    pub reference_frames: usize,
    pub image_widths: [usize; 4],
    pub event_widths: [usize; 4],
    pub mem_hidden: usize,
    pub pool_mode: PoolMode,
    pub fusion: FusionArm,
    pub residual: bool,
    pub softmax_axis: SoftmaxAxis,
    /// Initial channel-attention temperature. The default is the feature-map
    /// pixel count at the default size, which turns the affinity into a
    /// spatial mean of products.
    pub init_temperature: f64,
    pub decoder_blocks: usize,
    pub window_radius: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            num_classes: 5,
            channels: 32,
            reference_frames: 3,
            image_widths: [16, 32, 64, 128],
            event_widths: [8, 16, 32, 64],
            mem_hidden: 16,
            pool_mode: PoolMode::Temporal,
            fusion: FusionArm::default(),
            residual: true,
            softmax_axis: SoftmaxAxis::Keys,
            init_temperature: ((64 / OUT_STRIDE) * (64 / OUT_STRIDE)) as f64,
            decoder_blocks: 2,
            window_radius: 1,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn frames(&self) -> usize {
        self.reference_frames + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(MAX_STRIDE)
            || !self.width.is_multiple_of(MAX_STRIDE)
        {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {MAX_STRIDE}",
                self.height, self.width
            )));
        }
        if self.num_classes == 0 || self.num_classes > IGNORE_INDEX as usize {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={}, got {}",
                IGNORE_INDEX, self.num_classes
            )));
        }
        if self.channels == 0 || self.mem_hidden == 0 {
            return Err(Error::Config("channels and mem_hidden must be positive".into()));
        }
        if !(self.init_temperature.is_finite() && self.init_temperature > 0.0) {
            return Err(Error::Config("init_temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn image_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            widths: self.image_widths,
            out_channels: self.channels,
            norm_eps: self.norm_eps,
        }
    }

    pub fn mem(&self) -> MemConfig {
        MemConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                widths: self.event_widths,
                out_channels: self.channels,
                norm_eps: self.norm_eps,
            },
            hidden: self.mem_hidden,
            frames: self.frames(),
            pool_mode: self.pool_mode,
        }
    }

    pub fn fusion_config(&self, arrangement: Arrangement) -> FusionConfig {
        FusionConfig {
            channels: self.channels,
            arrangement,
            residual: self.residual,
            softmax_axis: self.softmax_axis,
            init_temperature: self.init_temperature,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            channels: self.channels,
            num_classes: self.num_classes,
            frames: self.frames(),
            blocks: self.decoder_blocks,
            window_radius: self.window_radius,
            upsample: 4,
        }
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    /// `[T,H/4,W/4,C]` image features.
    pub image: NodeId,
    pub motion: Option<MotionFeatures>,
    /// `[T,H/4,W/4,C]` features fed to the decoder.
    pub fused: NodeId,
    /// `[1,H,W,K]` logits of frame 0.
    pub logits: NodeId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image_encoder: Encoder,
    pub motion: Option<MotionExtractor>,
    pub fusion: Option<MotionFusion>,
    pub decoder: TemporalDecoder,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (motion, fusion) = match cfg.fusion {
            FusionArm::NoFusion => (None, None),
            FusionArm::Fused(a) => (
                Some(MotionExtractor::new("mem", cfg.mem())?),
                Some(MotionFusion::new("mfm", &cfg.fusion_config(a))),
            ),
        };
        Ok(Model {
            image_encoder: Encoder::new("image_encoder", cfg.image_encoder())?,
            motion,
            fusion,
            decoder: TemporalDecoder::new("decoder", cfg.decoder())?,
            cfg: cfg.clone(),
        })
    }

    pub fn uses_events(&self) -> bool {
        self.motion.is_some()
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.image_encoder.init(&mut store, &mut rng);
        if let Some(m) = &self.motion {
            m.init(&mut store, &mut rng);
        }
        if let Some(f) = &self.fusion {
            f.init(&mut store, &mut rng);
        }
        self.decoder.init(&mut store, &mut rng);
        store
    }

    fn check_inputs(&self, g: &Graph, images: NodeId, events: Option<NodeId>) -> Result<()> {
        let s = g.shape(images);
        let t = self.cfg.frames();
        if s.len() != 4 || s[0] != t || s[3] != 3 {
            return Err(Error::Shape(format!("images {s:?}: expected [{t}, H, W, 3]")));
        }
        if let Some(e) = events {
            let es = g.shape(e);
            if es != [t, s[1], s[2], 1] {
                return Err(Error::Shape(format!(
                    "event frames {es:?} do not match images {s:?}"
                )));
            }
        } else if self.uses_events() {
            return Err(Error::Config("this model needs event frames".into()));
        }
        Ok(())
    }

    /// `images [T,H,W,3]` and `events [T,H,W,1]`, frame 0 current.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: NodeId,
        events: Option<NodeId>,
    ) -> Result<ModelTrace> {
        self.check_inputs(g, images, events)?;
        let image = self.image_encoder.forward(g, store, images)?;
        let (motion, fused) = match (&self.motion, &self.fusion, events) {
            (Some(mem), Some(mfm), Some(ev)) => {
                let m = mem.forward(g, store, ev)?;
                let f = mfm.fuse(g, store, image, m.fused)?;
                (Some(m), f)
            }
            _ => (None, image),
        };
        let logits = self.decoder.forward(g, store, fused)?;
        Ok(ModelTrace {
            image,
            motion,
            fused,
            logits,
        })
    }

    /// Mean pixelwise cross-entropy of the current frame against `mask`.
    pub fn loss(&self, g: &mut Graph, trace: &ModelTrace, mask: &SegMask) -> Result<NodeId> {
        pixel_cross_entropy(g, trace.logits, mask)
    }

    /// Logits `[H,W,K]` and the predicted mask for one window.
    pub fn predict(
        &self,
        store: &ParamStore,
        images: &Tensor,
        events: Option<&Tensor>,
    ) -> Result<(Tensor, SegMask)> {
        let mut g = Graph::new();
        let im = g.constant(images.clone());
        let ev = events.map(|e| g.constant(e.clone()));
        let trace = self.forward(&mut g, store, im, ev)?;
        let out = g.value(trace.logits).clone();
        let s = out.shape()[1..].to_vec();
        let logits = out.reshape(&s)?;
        let mask = predict_mask(&logits)?;
        Ok((logits, mask))
    }

    /// Analytic per-layer costs for one window at `h x w` input.
    pub fn layer_costs(&self, h: usize, w: usize) -> Vec<LayerCost> {
        let t = self.cfg.frames();
        let mut out = self.image_encoder.costs(t, h, w);
        if let Some(m) = &self.motion {
            out.extend(m.costs(t, h, w));
        }
        if let Some(f) = &self.fusion {
            out.extend(f.costs(t, h / 4, w / 4));
        }
        out.extend(self.decoder.costs(h / 4, w / 4));
        out
    }
}

/// Cross-entropy of `[1,H,W,K]` (or `[H,W,K]`) logits against a mask; ignored
/// pixels do not contribute.
pub fn pixel_cross_entropy(g: &mut Graph, logits: NodeId, mask: &SegMask) -> Result<NodeId> {
    let s = g.shape(logits).to_vec();
    let k = *s.last().unwrap_or(&0);
    let n = s.iter().product::<usize>() / k.max(1);
    let hw = (s[s.len() - 3], s[s.len() - 2]);
    if n != mask.labels.len() || hw != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "logits {s:?} vs mask {}x{}",
            mask.height, mask.width
        )));
    }
    let flat = g.reshape(logits, &[n, k])?;
    let labels: Vec<usize> = mask.labels.iter().map(|&l| l as usize).collect();
    Ok(g.cross_entropy(flat, &labels, mask.ignore_index as usize)?)
}
