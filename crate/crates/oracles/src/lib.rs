//! Slow, obviously-correct reference implementations.
//!
//! Everything here is written as explicit index loops over plain vectors so
//! it shares no code path with the graph kernels it checks. Layouts follow
//! the main crates: channel-last `[T,H,W,C]`, conv weights
//! `[kt,kh,kw,Cin,Cout]`, depthwise weights `[k,k,C]`.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use evseg_autograd::ParamStore;

/// Raw data of a named parameter.
pub fn p(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .data()
        .to_vec()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax of one row, computed directly from the definition.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

/// Signed per-pixel event counts between two `[H,W,3]` frames.
pub fn event_counts(prev: &[f64], curr: &[f64], threshold: f64, eps: f64) -> Vec<i64> {
    let n = prev.len() / 3;
    let mut out = vec![0; n];
    for i in 0..n {
        let lp = (prev[3 * i] + prev[3 * i + 1] + prev[3 * i + 2]) / 3.0;
        let lc = (curr[3 * i] + curr[3 * i + 1] + curr[3 * i + 2]) / 3.0;
        let d = (lc + eps).ln() - (lp + eps).ln();
        let mut k = 0i64;
        while (k + 1) as f64 * threshold <= d.abs() {
            k += 1;
        }
        out[i] = if d > 0.0 { k } else { -k };
    }
    out
}

/// Grey-level encoding of signed counts.
#[allow(clippy::manual_clamp)]
pub fn encode_counts(net: &[i64], max_events: u32) -> Vec<f64> {
    net.iter()
        .map(|&n| {
            let mut r = n as f64 / max_events as f64;
            if r > 1.0 {
                r = 1.0;
            }
            if r < -1.0 {
                r = -1.0;
            }
            0.5 + 0.5 * r
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Dense convolution; temporal taps `t..t+kt` clamp to the last frame,
/// spatial taps outside the image read zero.
pub fn conv(
    x: &[f64],
    [t, h, w, cin]: [usize; 4],
    wt: &[f64],
    [kt, kh, kw, cout]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; t * ho * wo * cout];
    for ti in 0..t {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for dt in 0..kt {
                        let ts = (ti + dt).min(t - 1);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x[((ts * h + iy as usize) * w + ix as usize) * cin + ci];
                                    let wv = wt[(((dt * kh + ky) * kw + kx) * cin + ci) * cout + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out[((ti * ho + oy) * wo + ox) * cout + co] = acc;
                }
            }
        }
    }
    (out, [t, ho, wo, cout])
}

/// 1x1 projection `[N, cin] -> [N, cout]`.
pub fn pointwise(x: &[f64], cin: usize, wt: &[f64], cout: usize, bias: &[f64]) -> Vec<f64> {
    let n = x.len() / cin;
    let mut out = vec![0.0; n * cout];
    for i in 0..n {
        for co in 0..cout {
            let mut acc = bias[co];
            for ci in 0..cin {
                acc += x[i * cin + ci] * wt[ci * cout + co];
            }
            out[i * cout + co] = acc;
        }
    }
    out
}

/// Same-padded depthwise convolution of `[B,H,W,C]`.
pub fn depthwise(x: &[f64], [b, h, w, c]: [usize; 4], wt: &[f64], k: usize, bias: &[f64]) -> Vec<f64> {
    let pad = (k / 2) as i64;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut acc = bias[ch];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as i64 + ky as i64 - pad;
                            let ix = xx as i64 + kx as i64 - pad;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            acc += x[((bi * h + iy as usize) * w + ix as usize) * c + ch]
                                * wt[(ky * k + kx) * c + ch];
                        }
                    }
                    out[((bi * h + y) * w + xx) * c + ch] = acc;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling of `[B,H,W,C]` by `f`.
pub fn upsample_nearest(x: &[f64], [b, h, w, c]: [usize; 4], f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; b * ho * wo * c];
    for bi in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    out[((bi * ho + y) * wo + xx) * c + ch] = x[((bi * h + y / f) * w + xx / f) * c + ch];
                }
            }
        }
    }
    out
}

/// Channel concatenation of per-pixel feature vectors.
pub fn concat(parts: &[(&[f64], usize)]) -> Vec<f64> {
    let n = parts[0].0.len() / parts[0].1;
    let mut out = Vec::new();
    for i in 0..n {
        for (x, c) in parts {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model layers
// ---------------------------------------------------------------------------

/// Multi-scale mixer: stage `i` has shape `[T, h0 >> i, w0 >> i, widths[i]]`.
pub fn mix_scales(
    store: &ParamStore,
    prefix: &str,
    stages: &[Vec<f64>],
    t: usize,
    h0: usize,
    w0: usize,
    widths: [usize; 4],
    c: usize,
) -> Vec<f64> {
    let mut ups = Vec::new();
    for i in 0..4 {
        let name = format!("{prefix}.mixer.proj{}", i + 1);
        let proj = pointwise(&stages[i], widths[i], &p(store, &format!("{name}.weight")), c, &p(store, &format!("{name}.bias")));
        let f = 1 << i;
        ups.push(upsample_nearest(&proj, [t, h0 / f, w0 / f, c], f));
    }
    let cat = concat(&[(&ups[0], c), (&ups[1], c), (&ups[2], c), (&ups[3], c)]);
    pointwise(
        &cat,
        4 * c,
        &p(store, &format!("{prefix}.mixer.fuse.weight")),
        c,
        &p(store, &format!("{prefix}.mixer.fuse.bias")),
    )
}

/// Temporal block of the motion branch on `[T,H,W,C]` with hidden width `hd`.
/// `global` selects the frame-pair global mean instead of the per-pixel one.
pub fn temporal_block(store: &ParamStore, prefix: &str, f_e: &[f64], [t, h, w, c]: [usize; 4], hd: usize, global: bool) -> Vec<f64> {
    let pw = |x: &[f64], cin: usize, name: &str, cout: usize| {
        pointwise(x, cin, &p(store, &format!("{prefix}.{name}.weight")), cout, &p(store, &format!("{prefix}.{name}.bias")))
    };
    let y = pw(f_e, c, "tau1", hd);
    let (y, _) = conv(&y, [t, h, w, hd], &p(store, &format!("{prefix}.f1.weight")), [2, 3, 3, hd], Some(&p(store, &format!("{prefix}.f1.bias"))), 1, 1);
    let y = pw(&y, hd, "tau2", hd);
    let (y, _) = conv(&y, [t, h, w, hd], &p(store, &format!("{prefix}.f2.weight")), [1, 3, 3, hd], Some(&p(store, &format!("{prefix}.f2.bias"))), 1, 1);
    let y = pw(&y, hd, "tau3", c);
    let s: Vec<f64> = y.iter().zip(f_e).map(|(a, b)| a + b).collect();
    let frame = h * w * c;
    let mut pooled = vec![0.0; s.len()];
    for ti in 0..t {
        let tn = if ti + 1 < t { ti + 1 } else { t - 1 };
        if global {
            for ch in 0..c {
                let mut acc = 0.0;
                for px in 0..h * w {
                    acc += s[ti * frame + px * c + ch] + s[tn * frame + px * c + ch];
                }
                for px in 0..h * w {
                    pooled[ti * frame + px * c + ch] = acc / (2 * h * w) as f64;
                }
            }
        } else {
            for i in 0..frame {
                pooled[ti * frame + i] = (s[ti * frame + i] + s[tn * frame + i]) / 2.0;
            }
        }
    }
    pw(&pooled, c, "tau4", c).into_iter().map(|v| v.max(0.0)).collect()
}

/// Which axis of the channel-affinity matrix is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Weights over key channels sum to 1 for each query channel.
    Keys,
    /// Softmax over the last axis of `K Q`.
    Queries,
}

/// Channel attention on one frame `[H,W,C]`. Returns `(output, attention)`
/// where `attention` is the row-normalized `C x C` matrix.
pub fn channel_attention(
    store: &ParamStore,
    prefix: &str,
    f_i: &[f64],
    f_m: &[f64],
    h: usize,
    w: usize,
    c: usize,
    axis: Axis,
    residual: bool,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dims = [1, h, w, c];
    let branch = |x: &[f64], tag: &str| {
        let a = depthwise(x, dims, &p(store, &format!("{prefix}.f3_{tag}.weight")), 3, &p(store, &format!("{prefix}.f3_{tag}.bias")));
        let b = depthwise(x, dims, &p(store, &format!("{prefix}.f4_{tag}.weight")), 5, &p(store, &format!("{prefix}.f4_{tag}.bias")));
        concat(&[(&a, c), (&b, c)])
    };
    let proj = |x: &[f64], name: &str| {
        pointwise(x, 2 * c, &p(store, &format!("{prefix}.{name}.weight")), c, &p(store, &format!("{prefix}.{name}.bias")))
    };
    let mot = branch(f_m, "motion");
    let img = branch(f_i, "image");
    let q = proj(&mot, "wq");
    let k = proj(&img, "wk");
    let v = proj(&img, "wv");
    let alpha = p(store, &format!("{prefix}.log_temperature"))[0].exp();
    let n = h * w;
    // kq[i][j] = sum_p K[p,i] Q[p,j]
    let mut kq = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            for px in 0..n {
                kq[i][j] += k[px * c + i] * q[px * c + j];
            }
        }
    }
    let mut out = vec![0.0; n * c];
    let attn: Vec<Vec<f64>> = match axis {
        Axis::Queries => {
            let a: Vec<Vec<f64>> = (0..c)
                .map(|i| softmax(&kq[i].iter().map(|v| v / alpha).collect::<Vec<_>>()))
                .collect();
            for px in 0..n {
                for j in 0..c {
                    for i in 0..c {
                        out[px * c + j] += v[px * c + i] * a[i][j];
                    }
                }
            }
            a
        }
        Axis::Keys => {
            let a: Vec<Vec<f64>> = (0..c)
                .map(|j| softmax(&(0..c).map(|i| kq[i][j] / alpha).collect::<Vec<_>>()))
                .collect();
            for px in 0..n {
                for j in 0..c {
                    for i in 0..c {
                        out[px * c + j] += v[px * c + i] * a[j][i];
                    }
                }
            }
            a
        }
    };
    if residual {
        for i in 0..n * c {
            out[i] += f_i[i];
        }
    }
    (out, attn)
}

/// Spatial attention on one frame `[H,W,C]`. Returns `(output, gate)`.
pub fn spatial_attention(store: &ParamStore, prefix: &str, f_i: &[f64], f_m: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = h * w;
    let mut maps = vec![0.0; n * 4];
    for px in 0..n {
        let (mut mi, mut si, mut mm, mut sm) = (f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0);
        for ch in 0..c {
            mi = mi.max(f_i[px * c + ch]);
            si += f_i[px * c + ch];
            mm = mm.max(f_m[px * c + ch]);
            sm += f_m[px * c + ch];
        }
        maps[px * 4] = mi;
        maps[px * 4 + 1] = si / c as f64;
        maps[px * 4 + 2] = mm;
        maps[px * 4 + 3] = sm / c as f64;
    }
    let (logits, _) = conv(&maps, [1, h, w, 4], &p(store, &format!("{prefix}.conv.weight")), [1, 7, 7, 1], Some(&p(store, &format!("{prefix}.conv.bias"))), 1, 3);
    let gate: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
    let mut out = vec![0.0; n * c];
    for px in 0..n {
        for ch in 0..c {
            out[px * c + ch] = f_i[px * c + ch] * gate[px];
        }
    }
    (out, gate)
}

/// Per-pixel argmax with lowest-index tie-break.
pub fn argmax(logits: &[f64], k: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for px in 0..logits.len() / k {
        let mut best = 0;
        for c in 1..k {
            if logits[px * k + c] > logits[px * k + best] {
                best = c;
            }
        }
        out.push(best as u8);
    }
    out
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// `[gt][pred]` counts skipping gt pixels equal to `ignore`.
pub fn confusion(frames: &[(&[u8], &[u8])], k: usize, ignore: u8) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for (pred, gt) in frames {
        for i in 0..gt.len() {
            if gt[i] != ignore {
                m[gt[i] as usize][pred[i] as usize] += 1;
            }
        }
    }
    m
}

/// `(per-class IoU, mIoU, WIoU)` with zero-union classes excluded.
pub fn iou(m: &[Vec<u64>]) -> (Vec<Option<f64>>, Option<f64>, Option<f64>) {
    let k = m.len();
    let mut total = 0u64;
    for g in 0..k {
        for q in 0..k {
            total += m[g][q];
        }
    }
    let mut per = Vec::new();
    let (mut sum, mut n, mut wsum) = (0.0, 0, 0.0);
    for c in 0..k {
        let tp = m[c][c];
        let mut fp = 0;
        let mut fn_ = 0;
        for o in 0..k {
            if o != c {
                fp += m[o][c];
                fn_ += m[c][o];
            }
        }
        if tp + fp + fn_ == 0 {
            per.push(None);
            continue;
        }
        let v = tp as f64 / (tp + fp + fn_) as f64;
        per.push(Some(v));
        sum += v;
        n += 1;
        wsum += (tp + fn_) as f64 / total as f64 * v;
    }
    let miou = if n > 0 { Some(sum / n as f64) } else { None };
    let wiou = if total > 0 { Some(wsum) } else { None };
    (per, miou, wiou)
}

/// Video consistency of one window; `gt_denominator` selects the
/// ground-truth consistency set as the denominator.
pub fn vc(gts: &[&[u8]], preds: &[&[u8]], ignore: u8, gt_denominator: bool) -> f64 {
    let n = gts[0].len();
    let (mut num, mut den) = (0usize, 0usize);
    for i in 0..n {
        let mut ignored = false;
        for g in gts {
            if g[i] == ignore {
                ignored = true;
            }
        }
        if ignored {
            continue;
        }
        let mut gc = true;
        let mut pc = true;
        for f in 1..gts.len() {
            if gts[f][i] != gts[0][i] {
                gc = false;
            }
            if preds[f][i] != preds[0][i] {
                pc = false;
            }
        }
        if gc && pc && gts[0][i] == preds[0][i] {
            num += 1;
        }
        if (gt_denominator && gc) || (!gt_denominator && pc) {
            den += 1;
        }
    }
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean VC over stride-1 windows of one clip; `None` if too short.
pub fn mvc(gts: &[&[u8]], preds: &[&[u8]], window: usize, ignore: u8) -> Option<f64> {
    if gts.len() < window {
        return None;
    }
    let mut vals = Vec::new();
    for s in 0..=gts.len() - window {
        vals.push(vc(&gts[s..s + window], &preds[s..s + window], ignore, true));
    }
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}
