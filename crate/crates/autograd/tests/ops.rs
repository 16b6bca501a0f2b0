#![allow(clippy::needless_range_loop)]

use evseg_autograd::{
    check_params, ConvSpec, GradCheck, Graph, NodeId, PairPool, ParamStore, Result, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (name, shape) in entries {
        s.insert(*name, Tensor::randn(shape, 0.7, &mut r));
    }
    s
}

/// Random fixed projection of a node down to a scalar.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let n = g.value(x).len();
    let w = Tensor::uniform(&[n], -1.0, 1.0, &mut rng(seed));
    g.dot_const(x, w.data())
}

fn assert_grad<F>(s: &ParamStore, f: F)
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let report = check_params(s, None, &GradCheck::default(), f).unwrap();
    assert!(
        report.passes(TOL),
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

/// Direct nested-loop convolution with temporal replicate padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (t, h, wd, cin) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kt, kh, kw, cout) = (w.dim(0), w.dim(1), w.dim(2), w.dim(4));
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[t, ho, wo, cout]);
    for ti in 0..t {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = b[co];
                    for dt in 0..kt {
                        let ts = (ti + dt).min(t - 1);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at(&[ts, iy as usize, ix as usize, ci])
                                        * w.at(&[dt, ky, kx, ci, co]);
                                }
                            }
                        }
                    }
                    out.set(&[ti, oy, ox, co], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_loop_oracle() {
    let mut r = rng(1);
    for &(kt, k, stride, pad) in &[(1, 3, 1, 1), (2, 3, 1, 1), (1, 3, 2, 1), (1, 1, 1, 0), (2, 1, 1, 0)] {
        let x = Tensor::randn(&[3, 6, 5, 2], 1.0, &mut r);
        let w = Tensor::randn(&[kt, k, k, 2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv(xi, wi, Some(bi), ConvSpec::strided(stride, pad)).unwrap();
        let oracle = naive_conv(&x, &w, b.data(), stride, pad);
        assert_eq!(g.shape(y), oracle.shape());
        assert!(g.value(y).max_abs_diff(&oracle) < 1e-12);
    }
}

#[test]
fn conv_gradients() {
    for &(kt, k, stride, pad) in &[(1, 3, 1, 1), (2, 3, 1, 1), (1, 3, 2, 1), (1, 1, 1, 0)] {
        let s = store(&[("x", &[3, 5, 4, 2]), ("w", &[kt, k, k, 2, 3]), ("b", &[3])], 2);
        assert_grad(&s, |g, s| {
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = g.conv(x, w, Some(b), ConvSpec::strided(stride, pad))?;
            project(g, y, 3)
        });
    }
}

#[test]
fn depthwise_gradients_and_oracle() {
    let s = store(&[("x", &[2, 5, 4, 3]), ("w", &[5, 5, 3]), ("b", &[3])], 4);
    assert_grad(&s, |g, s| {
        let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
        let y = g.depthwise(x, w, Some(b))?;
        project(g, y, 5)
    });

    // A depthwise kernel equals a dense kernel that is diagonal in channels.
    let x = s.get("x").unwrap().clone();
    let w = s.get("w").unwrap();
    let mut dense = Tensor::zeros(&[1, 5, 5, 3, 3]);
    for ky in 0..5 {
        for kx in 0..5 {
            for c in 0..3 {
                dense.set(&[0, ky, kx, c, c], w.at(&[ky, kx, c]));
            }
        }
    }
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(s.get("b").unwrap().clone()));
    let y = g.depthwise(xi, wi, Some(bi)).unwrap();
    let oracle = naive_conv(&x, &dense, s.get("b").unwrap().data(), 1, 2);
    assert!(g.value(y).max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn matmul_all_transpose_combinations() {
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let sb: &[usize] = if tb { &[2, 4] } else { &[4, 2] };
        let s = store(&[("a", sa), ("b", sb)], 6);
        assert_grad(&s, |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.matmul(a, b, ta, tb)?;
            project(g, y, 7)
        });
        let mut g = Graph::new();
        let (a, b) = (g.constant(s.get("a").unwrap().clone()), g.constant(s.get("b").unwrap().clone()));
        let y = g.matmul(a, b, ta, tb).unwrap();
        let av = |i: usize, p: usize| if ta { s.get("a").unwrap().at(&[p, i]) } else { s.get("a").unwrap().at(&[i, p]) };
        let bv = |p: usize, j: usize| if tb { s.get("b").unwrap().at(&[j, p]) } else { s.get("b").unwrap().at(&[p, j]) };
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|p| av(i, p) * bv(p, j)).sum();
                assert!((g.value(y).at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let s = store(
        &[("a", &[2, 3, 3, 4]), ("b", &[2, 3, 3, 4]), ("v", &[4]), ("gate", &[2, 3, 3, 1]), ("tab", &[2, 4]), ("s", &[1])],
        8,
    );
    assert_grad(&s, |g, s| {
        let (a, b, v) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "v")?);
        let gate = g.param(s, "gate")?;
        let tab = g.param(s, "tab")?;
        let sc = g.param(s, "s")?;
        let m = g.mul(a, b)?;
        let d = g.sub(m, a)?;
        let e = g.add_channel(d, v)?;
        let f = g.mul_channel(e, v)?;
        let gt = g.sigmoid(gate);
        let h = g.gate(f, gt)?;
        let h = g.add_frame_rows(h, tab)?;
        let es = g.exp(sc);
        let h = g.div_scalar(h, es)?;
        let h = g.scale(h, 0.3);
        let r = g.add(h, b)?;
        project(g, r, 9)
    });
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::new(&[6], vec![-1.0, 0.5, 0.01, 2.0, -0.3, 1.2]).unwrap());
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x")?;
        let y = g.relu(x);
        project(g, y, 1)
    });
}

#[test]
fn norm_pool_resample_gradients() {
    let s = store(&[("x", &[2, 4, 4, 3])], 10);
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x")?;
        let n = g.instance_norm(x, 1e-5)?;
        project(g, n, 11)
    });
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x")?;
        let u = g.upsample_nearest(x, 2)?;
        let b = g.upsample_bilinear(x, 4)?;
        let (pu, pb) = (project(g, u, 12)?, project(g, b, 13)?);
        g.add(pu, pb)
    });
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x")?;
        let mx = g.channel_max(x)?;
        let mn = g.channel_mean(x)?;
        let c = g.concat_channels(&[mx, mn, x])?;
        project(g, c, 14)
    });
    for mode in [PairPool::Temporal, PairPool::GlobalBroadcast] {
        assert_grad(&s, |g, s| {
            let x = g.param(s, "x")?;
            let p = g.pair_pool(x, mode)?;
            project(g, p, 15)
        });
    }
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x")?;
        let f1 = g.select_frame(x, 1)?;
        let f0 = g.select_frame(x, 0)?;
        let st = g.stack(&[f1, f0, f1])?;
        let r = g.reshape(st, &[3 * 16, 3])?;
        let t = g.transpose(r)?;
        let sm = g.softmax_rows(t)?;
        project(g, sm, 16)
    });
}

#[test]
fn bilinear_preserves_constants_and_matches_half_pixel_rule() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 3, 3, 2], 0.7));
    let y = g.upsample_bilinear(x, 4).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-15));

    // 1-D ramp: output sample o maps to source (o + 0.5)/4 - 0.5, clamped.
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1, 2, 1], vec![0.0, 1.0]).unwrap());
    let y = g.upsample_bilinear(x, 4).unwrap();
    let want = [0.0, 0.0, 0.125, 0.375, 0.625, 0.875, 1.0, 1.0];
    for (o, w) in g.value(y).data().iter().zip(want) {
        assert!((o - w).abs() < 1e-15);
    }
}

fn naive_window_attention(q: &Tensor, k: &Tensor, v: &Tensor, r: i64, scale: f64) -> Tensor {
    let (h, w, d, t) = (q.dim(0), q.dim(1), q.dim(2), k.dim(0));
    let mut out = Tensor::zeros(&[h, w, d]);
    for y in 0..h {
        for x in 0..w {
            let mut logits = Vec::new();
            let mut sites = Vec::new();
            for ti in 0..t {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        let s: f64 = (0..d).map(|i| q.at(&[y, x, i]) * k.at(&[ti, yy, xx, i])).sum();
                        logits.push(scale * s);
                        sites.push((ti, yy, xx));
                    }
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (l, &(ti, yy, xx)) in logits.iter().zip(&sites) {
                let a = (l - m).exp() / z;
                for i in 0..d {
                    let cur = out.at(&[y, x, i]);
                    out.set(&[y, x, i], cur + a * v.at(&[ti, yy, xx, i]));
                }
            }
        }
    }
    out
}

#[test]
fn window_attention_oracle_and_gradients() {
    let s = store(&[("q", &[4, 3, 2]), ("k", &[3, 4, 3, 2]), ("v", &[3, 4, 3, 2])], 17);
    let mut g = Graph::new();
    let (q, k, v) = (
        g.constant(s.get("q").unwrap().clone()),
        g.constant(s.get("k").unwrap().clone()),
        g.constant(s.get("v").unwrap().clone()),
    );
    let y = g.window_attention(q, k, v, 1, 0.5).unwrap();
    let oracle = naive_window_attention(s.get("q").unwrap(), s.get("k").unwrap(), s.get("v").unwrap(), 1, 0.5);
    assert!(g.value(y).max_abs_diff(&oracle) < 1e-12);
    for row in g.attention_weights(y).unwrap().chunks(27) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_grad(&s, |g, s| {
        let (q, k, v) = (g.param(s, "q")?, g.param(s, "k")?, g.param(s, "v")?);
        let y = g.window_attention(q, k, v, 1, 0.5)?;
        project(g, y, 18)
    });
}

#[test]
fn cross_entropy_value_and_gradient() {
    let s = store(&[("z", &[5, 3])], 19);
    let labels = [0, 2, 255, 1, 2];
    assert_grad(&s, |g, s| {
        let z = g.param(s, "z")?;
        g.cross_entropy(z, &labels, 255)
    });
    let mut g = Graph::new();
    let z = g.constant(s.get("z").unwrap().clone());
    let l = g.cross_entropy(z, &labels, 255).unwrap();
    let zt = s.get("z").unwrap();
    let mut want = 0.0;
    for (p, &lab) in labels.iter().enumerate() {
        if lab == 255 {
            continue;
        }
        let lse = (0..3).map(|j| zt.at(&[p, j]).exp()).sum::<f64>().ln();
        want += lse - zt.at(&[p, lab]);
    }
    assert!((g.scalar_value(l) - want / 4.0).abs() < 1e-12);
}

#[test]
fn shared_param_binds_once() {
    let s = store(&[("w", &[3])], 20);
    let mut g = Graph::new();
    let a = g.param(&s, "w").unwrap();
    let b = g.param(&s, "w").unwrap();
    assert_eq!(a, b);
    let m = g.mul(a, b).unwrap();
    let l = g.sum(m);
    let grads = g.backward(l).unwrap();
    let gw = grads.wrt(a);
    for (gv, wv) in gw.data().iter().zip(s.get("w").unwrap().data()) {
        assert!((gv - 2.0 * wv).abs() < 1e-12);
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b, false, false).is_err());
    let x = g.constant(Tensor::zeros(&[1, 4, 4, 2]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3, 2]));
    assert!(g.conv(x, w, None, ConvSpec::same(3)).is_err());
    assert!(g.add(a, x).is_err());
}

#[test]
fn mac_counter_tracks_conv_and_matmul() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 8, 8, 3]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3, 16]));
    g.conv(x, w, None, ConvSpec::same(3)).unwrap();
    assert_eq!(g.macs(), 8 * 8 * 27 * 16);
    let a = g.constant(Tensor::zeros(&[4, 5]));
    let b = g.constant(Tensor::zeros(&[5, 6]));
    g.matmul(a, b, false, false).unwrap();
    assert_eq!(g.macs(), 8 * 8 * 27 * 16 + 4 * 5 * 6);
}
