//! Reverse-mode tape.
//!
//! Every op evaluates eagerly and records what its backward pass needs. Node
//! ids are handed out in evaluation order, so a reverse sweep over ids is a
//! valid topological order.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, ConvSpec};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Two-frame temporal pooling with replicate padding at the sequence end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairPool {
    /// `out[t] = (x[t] + x[t+1]) / 2` per pixel.
    Temporal,
    /// Mean over frames `t, t+1` and all pixels, broadcast back over H and W.
    GlobalBroadcast,
}

enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Depthwise {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddChannel {
        x: NodeId,
        v: NodeId,
    },
    MulChannel {
        x: NodeId,
        v: NodeId,
    },
    AddFrameRows {
        x: NodeId,
        table: NodeId,
    },
    Gate {
        x: NodeId,
        gate: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    DivScalar {
        x: NodeId,
        s: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        xs: Vec<NodeId>,
        widths: Vec<usize>,
    },
    UpsampleNearest {
        x: NodeId,
        factor: usize,
    },
    UpsampleBilinear {
        x: NodeId,
        factor: usize,
    },
    ChannelMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    ChannelMean(NodeId),
    SoftmaxRows(NodeId),
    Transpose(NodeId),
    SelectFrame {
        x: NodeId,
        index: usize,
    },
    Stack(Vec<NodeId>),
    PairPool {
        x: NodeId,
        mode: PairPool,
    },
    WindowAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        radius: usize,
        scale: f64,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(NodeId),
    Dot {
        x: NodeId,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Evaluation tape. Build a forward pass with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    param_order: Vec<(String, NodeId)>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by conv, matmul and attention ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Binds parameter `name` from `store`. Repeated requests return the same
    /// node so shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .clone();
        let id = self.variable(value);
        self.params.insert(name.to_string(), id);
        self.param_order.push((name.to_string(), id));
        Ok(id)
    }

    pub fn bound_params(&self) -> &[(String, NodeId)] {
        &self.param_order
    }

    // ---------------------------------------------------------------------
    // Linear ops
    // ---------------------------------------------------------------------

    /// Convolution of `x [T,H,W,Cin]` with `w [kt,kh,kw,Cin,Cout]`.
    ///
    /// Temporal taps read frames `t .. t+kt-1`, clamped to the last frame.
    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(TensorError::shape(
                    "conv",
                    format!("bias {:?} for {} outputs", self.shape(b), geom.cout),
                ));
            }
        }
        let rows = geom.rows();
        let mut out = vec![0.0; rows * geom.cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_mut(geom.cout) {
                r.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(geom.im2col(self.value(x).data()))
        };
        {
            let a = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            gemm_into(
                rows,
                geom.kdim(),
                geom.cout,
                a,
                false,
                self.value(w).data(),
                false,
                &mut out,
                beta,
            );
        }
        self.macs += geom.macs();
        let value = Tensor::new(&geom.out_shape(), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Same-padded depthwise convolution of `x [B,H,W,C]` with `w [k,k,C]`.
    pub fn depthwise(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 3 || ws[0] != ws[1] || ws[0].is_multiple_of(2) || ws[2] != xs[3] {
            return Err(TensorError::shape(
                "depthwise",
                format!("x {xs:?} with kernel {ws:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [xs[3]] {
                return Err(TensorError::shape("depthwise", "bias length"));
            }
        }
        let k = ws[0];
        let dims = [xs[0], xs[1], xs[2], xs[3]];
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            dims,
            self.value(w).data(),
            k,
            b.map(|b| self.value(b).data()),
        );
        self.macs += (numel(&xs) * k * k) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(&xs, out)?, Op::Depthwise { x, w, b, k }, &inputs))
    }

    /// `op(a) @ op(b)` for rank-2 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::shape("matmul", "operands must be rank 2"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("{sa:?}{} x {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_into(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        self.macs += (m * k * n) as u64;
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_values(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, Op::Scale(x, factor), &[x])
    }

    fn check_channel_vec(&self, op: &'static str, x: NodeId, v: NodeId) -> Result<usize> {
        let c = self.value(x).channels();
        if self.shape(v) != [c] {
            return Err(TensorError::shape(
                op,
                format!("vector {:?} for {} channels", self.shape(v), c),
            ));
        }
        Ok(c)
    }

    /// `x[..., c] + v[c]`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let c = self.check_channel_vec("add_channel", x, v)?;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(vv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(out, Op::AddChannel { x, v }, &[x, v]))
    }

    /// `x[..., c] * v[c]`.
    pub fn mul_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let c = self.check_channel_vec("mul_channel", x, v)?;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(vv).for_each(|(o, s)| *o *= s);
        }
        Ok(self.push(out, Op::MulChannel { x, v }, &[x, v]))
    }

    /// `x[t, ..., c] + table[t, c]` for `x [T, ..., C]`.
    pub fn add_frame_rows(&mut self, x: NodeId, table: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap_or(&0);
        if xs.is_empty() || self.shape(table) != [xs[0], c] {
            return Err(TensorError::shape(
                "add_frame_rows",
                format!("table {:?} for input {xs:?}", self.shape(table)),
            ));
        }
        let per_frame = numel(&xs[1..]);
        let mut out = self.value(x).clone();
        let tv = self.value(table).data();
        for (t, frame) in out.data_mut().chunks_mut(per_frame).enumerate() {
            let row = &tv[t * c..(t + 1) * c];
            for px in frame.chunks_mut(c) {
                px.iter_mut().zip(row).for_each(|(o, e)| *o += e);
            }
        }
        Ok(self.push(out, Op::AddFrameRows { x, table }, &[x, table]))
    }

    /// `x[..., c] * gate[..., 0]`: one gate value shared by all channels of a pixel.
    pub fn gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate).to_vec();
        let c = *xs.last().unwrap_or(&0);
        if xs.len() != gs.len() || xs[..xs.len() - 1] != gs[..gs.len() - 1] || gs[gs.len() - 1] != 1
        {
            return Err(TensorError::shape("gate", format!("{xs:?} gated by {gs:?}")));
        }
        let mut out = self.value(x).clone();
        let gv = self.value(gate).data();
        for (px, &g) in out.data_mut().chunks_mut(c).zip(gv) {
            px.iter_mut().for_each(|o| *o *= g);
        }
        Ok(self.push(out, Op::Gate { x, gate }, &[x, gate]))
    }

    // ---------------------------------------------------------------------
    // Pointwise nonlinearities
    // ---------------------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    /// `x / s` for a single-element `s`.
    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(TensorError::shape("div_scalar", "divisor must have one element"));
        }
        let d = self.value(s).data()[0];
        let v = self.value(x).map(|e| e / d);
        Ok(self.push(v, Op::DivScalar { x, s }, &[x, s]))
    }

    // ---------------------------------------------------------------------
    // Normalization, reshaping, resampling
    // ---------------------------------------------------------------------

    /// Per-frame, per-channel standardization over spatial positions of
    /// `x [B,H,W,C]`. No affine part; see `mul_channel`/`add_channel`.
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("instance_norm", format!("{xs:?}")));
        }
        let (b, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; b * c];
        for bi in 0..b {
            let frame = &xv[bi * hw * c..(bi + 1) * hw * c];
            for ch in 0..c {
                let mean = frame.iter().skip(ch).step_by(c).sum::<f64>() / hw as f64;
                let var = frame
                    .iter()
                    .skip(ch)
                    .step_by(c)
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / hw as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[bi * c + ch] = is;
                for p in 0..hw {
                    let i = bi * hw * c + p * c + ch;
                    xhat[i] = (xv[i] - mean) * is;
                }
            }
        }
        let value = Tensor::new(&xs, xhat.clone())?;
        Ok(self.push(value, Op::InstanceNorm { x, xhat, inv_std }, &[x]))
    }

    /// Concatenates along the last axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = self.shape(*xs.first().ok_or_else(|| TensorError::shape("concat", "empty"))?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::shape("concat", format!("{s:?} vs {first:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let pixels = numel(lead);
        let mut out = vec![0.0; pixels * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let v = self.value(x).data();
            for p in 0..pixels {
                out[p * total + offset..p * total + offset + w].copy_from_slice(&v[p * w..(p + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                widths,
            },
            xs,
        ))
    }

    fn spatial4(&self, op: &'static str, x: NodeId) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(TensorError::shape(op, format!("expected [B,H,W,C], got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let [b, h, w, c] = self.spatial4("upsample_nearest", x)?;
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for y in 0..ho {
                for xx in 0..wo {
                    let src = ((bi * h + y / factor) * w + xx / factor) * c;
                    let dst = ((bi * ho + y) * wo + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let value = Tensor::new(&[b, ho, wo, c], out)?;
        Ok(self.push(value, Op::UpsampleNearest { x, factor }, &[x]))
    }

    /// Half-pixel-centred bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let [b, h, w, c] = self.spatial4("upsample_bilinear", x)?;
        let (ty, tx) = (kernels::bilinear_taps(h, factor), kernels::bilinear_taps(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let dst = ((bi * ho + y) * wo + xx) * c;
                    let corners = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (sy, sx, wgt) in corners {
                        let src = ((bi * h + sy) * w + sx) * c;
                        for ch in 0..c {
                            out[dst + ch] += wgt * xv[src + ch];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, ho, wo, c], out)?;
        Ok(self.push(value, Op::UpsampleBilinear { x, factor }, &[x]))
    }

    /// Max over the last axis, keeping it with size 1. Ties resolve to the
    /// lowest channel.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| TensorError::shape("channel_max", "rank 0"))?;
        let mut argmax = Vec::with_capacity(numel(&s) / c.max(1));
        let mut out = Vec::with_capacity(argmax.capacity());
        for px in self.value(x).data().chunks(c) {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out.push(px[best]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ChannelMax { x, argmax }, &[x]))
    }

    /// Mean over the last axis, keeping it with size 1.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| TensorError::shape("channel_mean", "rank 0"))?;
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect();
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ChannelMean(x), &[x]))
    }

    /// Softmax along the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("softmax_rows", format!("{s:?}")));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(s[1]) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Slice along the leading axis, dropping it.
    pub fn select_frame(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let value = self.value(x).frame(index)?;
        Ok(self.push(value, Op::SelectFrame { x, index }, &[x]))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let items: Vec<Tensor> = xs.iter().map(|&x| self.value(x).clone()).collect();
        let value = Tensor::stack(&items)?;
        Ok(self.push(value, Op::Stack(xs.to_vec()), xs))
    }

    /// Two-frame average pooling of `x [T,H,W,C]`, length preserving.
    pub fn pair_pool(&mut self, x: NodeId, mode: PairPool) -> Result<NodeId> {
        let [t, h, w, c] = self.spatial4("pair_pool", x)?;
        let xv = self.value(x).data();
        let frame = h * w * c;
        let mut out = vec![0.0; xv.len()];
        for ti in 0..t {
            let tn = (ti + 1).min(t - 1);
            let (a, b) = (&xv[ti * frame..(ti + 1) * frame], &xv[tn * frame..(tn + 1) * frame]);
            let dst = &mut out[ti * frame..(ti + 1) * frame];
            match mode {
                PairPool::Temporal => {
                    for ((o, &p), &q) in dst.iter_mut().zip(a).zip(b) {
                        *o = 0.5 * (p + q);
                    }
                }
                PairPool::GlobalBroadcast => {
                    let mut mean = vec![0.0; c];
                    for (i, (&p, &q)) in a.iter().zip(b).enumerate() {
                        mean[i % c] += p + q;
                    }
                    mean.iter_mut().for_each(|m| *m /= (2 * h * w) as f64);
                    for px in dst.chunks_mut(c) {
                        px.copy_from_slice(&mean);
                    }
                }
            }
        }
        let value = Tensor::new(&[t, h, w, c], out)?;
        Ok(self.push(value, Op::PairPool { x, mode }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Attention and losses
    // ---------------------------------------------------------------------

    /// Local cross-frame attention. Each query pixel of `q [H,W,D]` attends to
    /// the `(2r+1)^2` neighbourhood around the same site in every frame of
    /// `k, v [T,H,W,D]`; out-of-image sites are excluded from the softmax.
    pub fn window_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        radius: usize,
        scale: f64,
    ) -> Result<NodeId> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 3 || ks.len() != 4 || ks[1..] != qs[..] || self.shape(v) != &ks[..] {
            return Err(TensorError::shape(
                "window_attention",
                format!("q {qs:?}, k {ks:?}, v {:?}", self.shape(v)),
            ));
        }
        let (h, w, d, t) = (qs[0], qs[1], qs[2], ks[0]);
        let sites = kernels::window_sites(t, radius);
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![0.0; h * w * sites];
        let mut out = vec![0.0; h * w * d];
        let mut logits = vec![f64::NEG_INFINITY; sites];
        let mut index = vec![None; sites];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let qp = &qv[p * d..(p + 1) * d];
                kernels::for_each_site(t, h, w, radius, y, x, |slot, site| {
                    index[slot] = site;
                    logits[slot] = match site {
                        Some(s) => scale * dot(qp, &kv[s * d..(s + 1) * d]),
                        None => f64::NEG_INFINITY,
                    };
                });
                softmax_in_place(&mut logits);
                let wrow = &mut weights[p * sites..(p + 1) * sites];
                wrow.copy_from_slice(&logits);
                let op = &mut out[p * d..(p + 1) * d];
                for (slot, site) in index.iter().enumerate() {
                    if let Some(s) = site {
                        let a = wrow[slot];
                        for (o, &vvv) in op.iter_mut().zip(&vv[s * d..(s + 1) * d]) {
                            *o += a * vvv;
                        }
                    }
                }
            }
        }
        self.macs += (2 * h * w * sites * d) as u64;
        let value = Tensor::new(&[h, w, d], out)?;
        Ok(self.push(
            value,
            Op::WindowAttention {
                q,
                k,
                v,
                radius,
                scale,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights recorded by a `window_attention` node, `[H*W, sites]`.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::WindowAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Mean pixelwise cross-entropy of `logits [N,K]` against `labels`;
    /// entries equal to `ignore` are skipped. Returns a `[1]` node.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        ignore: usize,
    ) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {s:?} for {} labels", labels.len()),
            ));
        }
        let kc = s[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (row, &label) in probs.chunks_mut(kc).zip(labels) {
            if label == ignore {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            if label >= kc {
                return Err(TensorError::shape(
                    "cross_entropy",
                    format!("label {label} with {kc} classes"),
                ));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            count += 1;
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// `sum_i x_i * weights_i` with constant weights; handy as a random
    /// projection loss in gradient checks.
    pub fn dot_const(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return Err(TensorError::shape("dot_const", "weight length"));
        }
        let v = Tensor::scalar(dot(self.value(x).data(), weights));
        Ok(self.push(
            v,
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Gradients of the single-element node `loss` with respect to every
    /// differentiable node it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::shape("backward", "loss must have one element"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_op(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = Acc {
            graph: self,
            grads,
        };
        match op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let rows = geom.rows();
                let (kdim, cout) = (geom.kdim(), geom.cout);
                if let Some(b) = b {
                    if let Some(db) = acc.slot(*b) {
                        for r in g.chunks(cout) {
                            db.iter_mut().zip(r).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                if let Some(dw) = acc.slot(*w) {
                    let a = cols.as_deref().unwrap_or_else(|| self.value(*x).data());
                    gemm_into(kdim, rows, cout, a, true, g, false, dw, 1.0);
                }
                if self.nodes[x.0].requires_grad {
                    let wv = self.value(*w).data();
                    if geom.is_pointwise() {
                        let dx = acc.slot(*x).expect("requires grad");
                        gemm_into(rows, cout, kdim, g, false, wv, true, dx, 1.0);
                    } else {
                        let mut dcols = vec![0.0; rows * kdim];
                        gemm_into(rows, cout, kdim, g, false, wv, true, &mut dcols, 0.0);
                        let dx = acc.slot(*x).expect("requires grad");
                        geom.col2im(&dcols, dx);
                    }
                }
            }
            Op::Depthwise { x, w, b, k } => {
                let s = self.shape(*x);
                let dims = [s[0], s[1], s[2], s[3]];
                if let Some(b) = b {
                    if let Some(db) = acc.slot(*b) {
                        for r in g.chunks(dims[3]) {
                            db.iter_mut().zip(r).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx_buf = self.nodes[x.0].requires_grad.then(|| vec![0.0; xv.len()]);
                let mut dw_buf = self.nodes[w.0].requires_grad.then(|| vec![0.0; wv.len()]);
                kernels::depthwise_backward(
                    xv,
                    dims,
                    wv,
                    *k,
                    g,
                    dx_buf.as_deref_mut(),
                    dw_buf.as_deref_mut(),
                );
                if let Some(d) = dx_buf {
                    acc.add(*x, &d);
                }
                if let Some(d) = dw_buf {
                    acc.add(*w, &d);
                }
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let bv = self.value(*b).data();
                    let da = acc.slot(*a).expect("requires grad");
                    if *ta {
                        // a stored [k,m]: da = op(b) g^T
                        gemm_into(k, n, m, bv, *tb, g, true, da, 1.0);
                    } else {
                        gemm_into(m, n, k, g, false, bv, !*tb, da, 1.0);
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.value(*a).data();
                    let db = acc.slot(*b).expect("requires grad");
                    if *tb {
                        // b stored [n,k]: db = g^T op(a)
                        gemm_into(n, m, k, g, true, av, *ta, db, 1.0);
                    } else {
                        gemm_into(k, m, n, av, !*ta, g, false, db, 1.0);
                    }
                }
            }
            Op::Reshape(x) => acc.add(*x, g),
            Op::Add(a, b) => {
                acc.add(*a, g);
                acc.add(*b, g);
            }
            Op::Sub(a, b) => {
                acc.add(*a, g);
                if let Some(d) = acc.slot(*b) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = acc.slot(*a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = acc.slot(*b) {
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(d) = acc.slot(*x) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += f * v);
                }
            }
            Op::AddChannel { x, v } => {
                acc.add(*x, g);
                if let Some(d) = acc.slot(*v) {
                    let c = d.len();
                    for r in g.chunks(c) {
                        d.iter_mut().zip(r).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MulChannel { x, v } => {
                let vv = self.value(*v).data();
                let c = vv.len();
                if let Some(d) = acc.slot(*x) {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(c)) {
                        for i in 0..c {
                            dr[i] += gr[i] * vv[i];
                        }
                    }
                }
                let xv = self.value(*x).data();
                if let Some(d) = acc.slot(*v) {
                    for (xr, gr) in xv.chunks(c).zip(g.chunks(c)) {
                        for i in 0..c {
                            d[i] += gr[i] * xr[i];
                        }
                    }
                }
            }
            Op::AddFrameRows { x, table } => {
                acc.add(*x, g);
                let ts = self.shape(*table).to_vec();
                let (t, c) = (ts[0], ts[1]);
                if let Some(d) = acc.slot(*table) {
                    let per_frame = g.len() / t;
                    for (ti, frame) in g.chunks(per_frame).enumerate() {
                        for px in frame.chunks(c) {
                            for i in 0..c {
                                d[ti * c + i] += px[i];
                            }
                        }
                    }
                }
            }
            Op::Gate { x, gate } => {
                let c = self.value(*x).channels();
                let gv = self.value(*gate).data();
                if let Some(d) = acc.slot(*x) {
                    for ((dr, gr), &gg) in d.chunks_mut(c).zip(g.chunks(c)).zip(gv) {
                        dr.iter_mut().zip(gr).for_each(|(d, v)| *d += v * gg);
                    }
                }
                let xv = self.value(*x).data();
                if let Some(d) = acc.slot(*gate) {
                    for ((dg, xr), gr) in d.iter_mut().zip(xv.chunks(c)).zip(g.chunks(c)) {
                        *dg += dot(xr, gr);
                    }
                }
            }
            Op::Relu(x) => {
                let ov = out.data();
                if let Some(d) = acc.slot(*x) {
                    for i in 0..g.len() {
                        if ov[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let ov = out.data();
                if let Some(d) = acc.slot(*x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * ov[i] * (1.0 - ov[i]);
                    }
                }
            }
            Op::Exp(x) => {
                let ov = out.data();
                if let Some(d) = acc.slot(*x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * ov[i];
                    }
                }
            }
            Op::DivScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if let Some(d) = acc.slot(*x) {
                    d.iter_mut().zip(g).for_each(|(d, v)| *d += v / sv);
                }
                let ov = out.data();
                if let Some(d) = acc.slot(*s) {
                    d[0] -= dot(g, ov) / sv;
                }
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let s = self.shape(*x);
                let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
                if let Some(d) = acc.slot(*x) {
                    for bi in 0..b {
                        for ch in 0..c {
                            let idx = |p: usize| bi * hw * c + p * c + ch;
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for p in 0..hw {
                                mean_g += g[idx(p)];
                                mean_gx += g[idx(p)] * xhat[idx(p)];
                            }
                            mean_g /= hw as f64;
                            mean_gx /= hw as f64;
                            let is = inv_std[bi * c + ch];
                            for p in 0..hw {
                                let i = idx(p);
                                d[i] += is * (g[i] - mean_g - xhat[i] * mean_gx);
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, widths } => {
                let total: usize = widths.iter().sum();
                let pixels = g.len() / total;
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    if let Some(d) = acc.slot(x) {
                        for p in 0..pixels {
                            let src = &g[p * total + offset..p * total + offset + w];
                            d[p * w..(p + 1) * w].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let s = self.shape(*x).to_vec();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                if let Some(d) = acc.slot(*x) {
                    for bi in 0..b {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let src = ((bi * h + y / factor) * w + xx / factor) * c;
                                let dst = ((bi * ho + y) * wo + xx) * c;
                                for ch in 0..c {
                                    d[src + ch] += g[dst + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::UpsampleBilinear { x, factor } => {
                let s = self.shape(*x).to_vec();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ty, tx) = (kernels::bilinear_taps(h, *factor), kernels::bilinear_taps(w, *factor));
                let (ho, wo) = (h * factor, w * factor);
                if let Some(d) = acc.slot(*x) {
                    for bi in 0..b {
                        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let dst = ((bi * ho + y) * wo + xx) * c;
                                let corners = [
                                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                    (y0, x1, (1.0 - fy) * fx),
                                    (y1, x0, fy * (1.0 - fx)),
                                    (y1, x1, fy * fx),
                                ];
                                for (sy, sx, wgt) in corners {
                                    let src = ((bi * h + sy) * w + sx) * c;
                                    for ch in 0..c {
                                        d[src + ch] += wgt * g[dst + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelMax { x, argmax } => {
                let c = self.value(*x).channels();
                if let Some(d) = acc.slot(*x) {
                    for (p, (&am, &gv)) in argmax.iter().zip(g).enumerate() {
                        d[p * c + am] += gv;
                    }
                }
            }
            Op::ChannelMean(x) => {
                let c = self.value(*x).channels();
                if let Some(d) = acc.slot(*x) {
                    for (p, &gv) in g.iter().enumerate() {
                        d[p * c..(p + 1) * c].iter_mut().for_each(|d| *d += gv / c as f64);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.dim(1);
                if let Some(d) = acc.slot(*x) {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let s = dot(yr, gr);
                        for i in 0..n {
                            dr[i] += yr[i] * (gr[i] - s);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.dim(1), out.dim(0));
                if let Some(d) = acc.slot(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SelectFrame { x, index } => {
                let n = g.len();
                if let Some(d) = acc.slot(*x) {
                    d[index * n..(index + 1) * n].iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Stack(xs) => {
                let n = g.len() / xs.len().max(1);
                for (i, &x) in xs.iter().enumerate() {
                    acc.add(x, &g[i * n..(i + 1) * n]);
                }
            }
            Op::PairPool { x, mode } => {
                let s = self.shape(*x).to_vec();
                let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
                let frame = h * w * c;
                if let Some(d) = acc.slot(*x) {
                    for ti in 0..t {
                        let tn = (ti + 1).min(t - 1);
                        let gf = &g[ti * frame..(ti + 1) * frame];
                        match mode {
                            PairPool::Temporal => {
                                for i in 0..frame {
                                    d[ti * frame + i] += 0.5 * gf[i];
                                    d[tn * frame + i] += 0.5 * gf[i];
                                }
                            }
                            PairPool::GlobalBroadcast => {
                                let mut gsum = vec![0.0; c];
                                for (i, v) in gf.iter().enumerate() {
                                    gsum[i % c] += v;
                                }
                                let norm = (2 * h * w) as f64;
                                for i in 0..frame {
                                    let v = gsum[i % c] / norm;
                                    d[ti * frame + i] += v;
                                    d[tn * frame + i] += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                radius,
                scale,
                weights,
            } => {
                let qs = self.shape(*q).to_vec();
                let t = self.shape(*k)[0];
                let (h, w, dd) = (qs[0], qs[1], qs[2]);
                let sites = kernels::window_sites(t, *radius);
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut da = vec![0.0; sites];
                let mut index = vec![None; sites];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let gp = &g[p * dd..(p + 1) * dd];
                        let wrow = &weights[p * sites..(p + 1) * sites];
                        kernels::for_each_site(t, h, w, *radius, y, x, |slot, site| {
                            index[slot] = site;
                        });
                        let mut mean = 0.0;
                        for (slot, site) in index.iter().enumerate() {
                            da[slot] = 0.0;
                            if let Some(s) = site {
                                da[slot] = dot(gp, &vv[s * dd..(s + 1) * dd]);
                                mean += wrow[slot] * da[slot];
                                let a = wrow[slot];
                                for (o, &gv) in dv[s * dd..(s + 1) * dd].iter_mut().zip(gp) {
                                    *o += a * gv;
                                }
                            }
                        }
                        let qp = &qv[p * dd..(p + 1) * dd];
                        for (slot, site) in index.iter().enumerate() {
                            if let Some(s) = site {
                                let ds = wrow[slot] * (da[slot] - mean) * scale;
                                for i in 0..dd {
                                    dq[p * dd + i] += ds * kv[s * dd + i];
                                    dk[s * dd + i] += ds * qp[i];
                                }
                            }
                        }
                    }
                }
                acc.add(*q, &dq);
                acc.add(*k, &dk);
                acc.add(*v, &dv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let kc = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                if let Some(d) = acc.slot(*logits) {
                    for (p, &label) in labels.iter().enumerate() {
                        if label == *ignore {
                            continue;
                        }
                        for j in 0..kc {
                            let target = if j == label { 1.0 } else { 0.0 };
                            d[p * kc + j] += scale * (probs[p * kc + j] - target);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = acc.slot(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Dot { x, weights } => {
                if let Some(d) = acc.slot(*x) {
                    d.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w);
                }
            }
        }
    }
}

struct Acc<'a> {
    graph: &'a Graph,
    grads: &'a mut [Option<Vec<f64>>],
}

impl Acc<'_> {
    /// Gradient buffer of `id`, created on first use; `None` when `id` does
    /// not need a gradient.
    fn slot(&mut self, id: NodeId) -> Option<&mut [f64]> {
        let node = &self.graph.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add(&mut self, id: NodeId, g: &[f64]) {
        if let Some(d) = self.slot(id) {
            d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of node `id`; zeros when the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        let shape = &self.shapes[id.0];
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients of every parameter bound in the graph, by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, Tensor)> + '_ {
        self.params.iter().map(|(n, id)| (n.as_str(), self.wrt(*id)))
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    kernels::gemm(m, k, n, a, ta, b, tb, c, beta);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax; `-inf` entries get weight zero.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let n = row.len() as f64;
        row.iter_mut().for_each(|v| *v = 1.0 / n);
        return;
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
