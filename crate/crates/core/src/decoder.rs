//! Cross-frame decoder: the current frame's features attend to a local
//! window around the same site in every frame, then a pointwise head
//! produces class logits that are bilinearly upsampled to input resolution.

use evseg_autograd::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::nn::{Conv, LayerCost};

/// Small head init keeps the initial logits near uniform.
const HEAD_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub num_classes: usize,
    /// `l + 1`; frame 0 is the current frame.
    pub frames: usize,
    pub blocks: usize,
    /// Window half-size; 1 gives a 3x3 neighbourhood.
    pub window_radius: usize,
    pub upsample: usize,
}

impl DecoderConfig {
    pub fn new(channels: usize, num_classes: usize, frames: usize) -> Self {
        DecoderConfig {
            channels,
            num_classes,
            frames,
            blocks: 2,
            window_radius: 1,
            upsample: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub name: String,
    pub wq: Conv,
    pub wk: Conv,
    pub wv: Conv,
    pub wo: Conv,
    pub mlp1: Conv,
    pub mlp2: Conv,
    pub radius: usize,
}

/// Intermediate nodes of one decoder block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    /// Node holding the window attention output; its weights are available
    /// through [`Graph::attention_weights`].
    pub attention: NodeId,
    pub out: NodeId,
}

impl DecoderBlock {
    fn new(name: String, c: usize, radius: usize) -> Self {
        let pw = |n: &str| Conv::pointwise(format!("{name}.{n}"), c, c);
        DecoderBlock {
            wq: pw("wq"),
            // A key bias shifts every logit of a query equally; softmax
            // cancels it.
            wk: pw("wk").without_bias(),
            wv: pw("wv"),
            wo: pw("wo"),
            mlp1: pw("mlp1").rectified(),
            mlp2: pw("mlp2"),
            name,
            radius,
        }
    }

    fn convs(&self) -> [&Conv; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.mlp1, &self.mlp2]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for c in self.convs() {
            c.init(store, rng);
        }
    }

    /// `x [H,W,C]` attends over `memory [T,H,W,C]`; returns `[H,W,C]`.
    pub fn trace(&self, g: &mut Graph, store: &ParamStore, x: NodeId, memory: NodeId) -> Result<BlockTrace> {
        let xs = g.shape(x).to_vec();
        let ms = g.shape(memory).to_vec();
        if xs.len() != 3 || ms.len() != 4 || ms[1..] != xs[..] {
            return Err(Error::Shape(format!(
                "decoder block: query {xs:?} and memory {ms:?} disagree"
            )));
        }
        let c = xs[2];
        let x4 = g.reshape(x, &[1, xs[0], xs[1], c])?;
        let q = self.wq.forward(g, store, x4)?;
        let q = g.reshape(q, &xs)?;
        let k = self.wk.forward(g, store, memory)?;
        let v = self.wv.forward(g, store, memory)?;
        let attention = g.window_attention(q, k, v, self.radius, 1.0 / (c as f64).sqrt())?;
        let a4 = g.reshape(attention, &[1, xs[0], xs[1], c])?;
        let proj = self.wo.forward(g, store, a4)?;
        let y = g.add(x4, proj)?;
        let hidden = self.mlp1.forward(g, store, y)?;
        let hidden = g.relu(hidden);
        let mlp = self.mlp2.forward(g, store, hidden)?;
        let y = g.add(y, mlp)?;
        let out = g.reshape(y, &xs)?;
        Ok(BlockTrace { attention, out })
    }

    pub fn costs(&self, frames: usize, h: usize, w: usize) -> Vec<LayerCost> {
        let c = self.wq.cin;
        let sites = frames * (2 * self.radius + 1).pow(2);
        vec![
            self.wq.cost(1, h, w),
            self.wk.cost(frames, h, w),
            self.wv.cost(frames, h, w),
            LayerCost::new(format!("{}.attention", self.name), 0, (2 * h * w * sites * c) as u64),
            self.wo.cost(1, h, w),
            self.mlp1.cost(1, h, w),
            self.mlp2.cost(1, h, w),
        ]
    }
}

/// Decoder outputs for one clip window.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub blocks: Vec<BlockTrace>,
    /// `[1,H',W',K]` logits at feature resolution.
    pub low_res: NodeId,
    /// `[1,H,W,K]` logits at input resolution.
    pub logits: NodeId,
}

#[derive(Clone, Debug)]
pub struct TemporalDecoder {
    pub cfg: DecoderConfig,
    pub prefix: String,
    pub blocks: Vec<DecoderBlock>,
    pub head: Conv,
}

impl TemporalDecoder {
    pub fn new(prefix: &str, cfg: DecoderConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.num_classes == 0 || cfg.frames == 0 || cfg.upsample == 0 {
            return Err(Error::Config(format!("invalid decoder config {cfg:?}")));
        }
        let blocks = (0..cfg.blocks)
            .map(|i| DecoderBlock::new(format!("{prefix}.block{}", i + 1), cfg.channels, cfg.window_radius))
            .collect();
        Ok(TemporalDecoder {
            head: Conv::pointwise(format!("{prefix}.head"), cfg.channels, cfg.num_classes).with_gain(HEAD_GAIN),
            prefix: prefix.to_string(),
            blocks,
            cfg,
        })
    }

    pub fn embedding_name(&self) -> String {
        format!("{}.temporal_embedding", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(
            self.embedding_name(),
            Tensor::randn(&[self.cfg.frames, self.cfg.channels], 0.02, rng),
        );
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.head.init(store, rng);
    }

    /// Adds the temporal embedding to fused `[l+1,H',W',C]` features.
    pub fn memory(&self, g: &mut Graph, store: &ParamStore, fused: NodeId) -> Result<NodeId> {
        let s = g.shape(fused).to_vec();
        if s.len() != 4 || s[0] != self.cfg.frames || s[3] != self.cfg.channels {
            return Err(Error::Shape(format!(
                "decoder expects [{}, H, W, {}] features, got {s:?}",
                self.cfg.frames, self.cfg.channels
            )));
        }
        let table = g.param(store, &self.embedding_name())?;
        Ok(g.add_frame_rows(fused, table)?)
    }

    /// Pointwise class logits of `[B,H',W',C]` features.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.head.forward(g, store, x)
    }

    pub fn trace(&self, g: &mut Graph, store: &ParamStore, fused: NodeId) -> Result<DecoderTrace> {
        let memory = self.memory(g, store, fused)?;
        let mut x = g.select_frame(memory, 0)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let t = b.trace(g, store, x, memory)?;
            x = t.out;
            blocks.push(t);
        }
        let s = g.shape(x).to_vec();
        let x4 = g.reshape(x, &[1, s[0], s[1], s[2]])?;
        let low_res = self.classify(g, store, x4)?;
        let logits = g.upsample_bilinear(low_res, self.cfg.upsample)?;
        Ok(DecoderTrace {
            blocks,
            low_res,
            logits,
        })
    }

    /// `[1,H,W,K]` logits for the current frame.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: NodeId) -> Result<NodeId> {
        Ok(self.trace(g, store, fused)?.logits)
    }

    /// Gradient-free decode returning `[H,W,K]`.
    pub fn decode(&self, store: &ParamStore, fused: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(fused.clone());
        let y = self.forward(&mut g, store, x)?;
        let out = g.value(y).clone();
        let s = out.shape()[1..].to_vec();
        Ok(out.reshape(&s)?)
    }

    pub fn costs(&self, h: usize, w: usize) -> Vec<LayerCost> {
        let frames = self.cfg.frames;
        let mut out = vec![LayerCost::new(
            self.embedding_name(),
            (frames * self.cfg.channels) as u64,
            0,
        )];
        for b in &self.blocks {
            out.extend(b.costs(frames, h, w));
        }
        out.push(self.head.cost(1, h, w));
        out
    }
}

/// Per-pixel argmax of `[H,W,K]` logits; ties go to the lowest class.
pub fn predict_mask(logits: &Tensor) -> Result<SegMask> {
    if logits.rank() != 3 || logits.dim(2) == 0 {
        return Err(Error::Shape(format!(
            "expected [H,W,K] logits, got {:?}",
            logits.shape()
        )));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in logits".into()));
    }
    let k = logits.dim(2);
    let labels = logits
        .data()
        .chunks(k)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    SegMask::new(logits.dim(0), logits.dim(1), labels)
}
