mod common;

use common::{grad_check, max_abs_diff, rng, with_input};
use evseg::autograd::{Graph, ParamStore, Tensor};
use evseg::fusion::{Arrangement, ChannelAttention, FusionConfig, MotionFusion, SoftmaxAxis, SpatialAttention};
use evseg::Error;
use evseg_oracles::{self as oracle, Axis};
use proptest::prelude::*;

fn cfg(c: usize, axis: SoftmaxAxis, residual: bool) -> FusionConfig {
    FusionConfig {
        channels: c,
        arrangement: Arrangement::ChannelThenSpatial,
        residual,
        softmax_axis: axis,
        init_temperature: 1.5,
    }
}

fn randomize_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            *t = Tensor::uniform(t.shape(), -0.5, 0.5, &mut r);
        }
    }
}

fn channel_layer(c: usize, axis: SoftmaxAxis, residual: bool, seed: u64) -> (ChannelAttention, ParamStore) {
    let ca = ChannelAttention::new("ca", &cfg(c, axis, residual));
    let mut store = ParamStore::new();
    ca.init(&mut store, &mut rng(seed));
    randomize_biases(&mut store, seed + 1);
    (ca, store)
}

fn spatial_layer(seed: u64) -> (SpatialAttention, ParamStore) {
    let sa = SpatialAttention::new("sa");
    let mut store = ParamStore::new();
    sa.init(&mut store, &mut rng(seed));
    randomize_biases(&mut store, seed + 1);
    (sa, store)
}

fn inputs(h: usize, w: usize, c: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (
        Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut r),
        Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut r),
    )
}

#[test]
fn channel_attention_matches_loop_oracle() {
    for (axis, oaxis) in [(SoftmaxAxis::Keys, Axis::Keys), (SoftmaxAxis::Queries, Axis::Queries)] {
        for residual in [true, false] {
            let (ca, store) = channel_layer(2, axis, residual, 1);
            let (fi, fm) = inputs(2, 2, 2, 2);
            let mut g = Graph::new();
            let (a, b) = (g.constant(fi.clone()), g.constant(fm.clone()));
            let tr = ca.trace(&mut g, &store, a, b).unwrap();
            let (expected, attn) = oracle::channel_attention(&store, "ca", fi.data(), fm.data(), 2, 2, 2, oaxis, residual);
            assert!(max_abs_diff(g.value(tr.out).data(), &expected) < 1e-10);
            let flat: Vec<f64> = attn.concat();
            assert!(max_abs_diff(g.value(tr.attention[0]).data(), &flat) < 1e-10);
        }
    }
}

#[test]
fn single_channel_attention_passes_values_through() {
    let (ca, store) = channel_layer(1, SoftmaxAxis::Keys, false, 3);
    let (fi, fm) = inputs(3, 3, 1, 4);
    let mut g = Graph::new();
    let (a, b) = (g.constant(fi), g.constant(fm));
    let tr = ca.trace(&mut g, &store, a, b).unwrap();
    assert_eq!(g.value(tr.attention[0]).data(), &[1.0]);
    assert_eq!(g.value(tr.out).data(), g.value(tr.v).data());
}

#[test]
fn attention_matrix_is_channel_by_channel_per_frame() {
    let (ca, store) = channel_layer(4, SoftmaxAxis::Keys, true, 5);
    let mut r = rng(6);
    let fi = Tensor::uniform(&[3, 4, 4, 4], -1.0, 1.0, &mut r);
    let fm = Tensor::uniform(&[3, 4, 4, 4], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (a, b) = (g.constant(fi.clone()), g.constant(fm.clone()));
    let tr = ca.trace(&mut g, &store, a, b).unwrap();
    assert_eq!(tr.attention.len(), 3);
    for (t, &att) in tr.attention.iter().enumerate() {
        assert_eq!(g.shape(att), &[4, 4]);
        // Each frame is fused independently.
        let (o, _) = oracle::channel_attention(
            &store, "ca", fi.frame(t).unwrap().data(), fm.frame(t).unwrap().data(), 4, 4, 4, Axis::Keys, true,
        );
        let out = g.value(tr.out).frame(t).unwrap();
        assert!(max_abs_diff(out.data(), &o) < 1e-10);
    }
}

#[test]
fn temperature_and_affinity_scale_together() {
    let (ca, store) = channel_layer(3, SoftmaxAxis::Keys, true, 7);
    let (fi, fm) = inputs(4, 4, 3, 8);
    let attention = |s: &ParamStore| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(fi.clone()), g.constant(fm.clone()));
        let tr = ca.trace(&mut g, s, a, b).unwrap();
        g.value(tr.attention[0]).clone()
    };
    let base = attention(&store);
    for c in [0.25, 3.0, 10.0] {
        let mut scaled = store.clone();
        // Scaling W_K and its bias scales K and so K.Q by c.
        for name in ["ca.wk.weight", "ca.wk.bias"] {
            let t = scaled.get(name).unwrap().map(|v| v * c);
            scaled.insert(name, t);
        }
        let lt = scaled.get("ca.log_temperature").unwrap().data()[0];
        scaled.insert("ca.log_temperature", Tensor::scalar(lt + f64::ln(c)));
        assert!(attention(&scaled).max_abs_diff(&base) < 1e-12);
    }
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let (ca, store) = channel_layer(2, SoftmaxAxis::Keys, true, 0);
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 2, 2]));
    let b = g.constant(Tensor::zeros(&[2, 2, 3]));
    assert!(matches!(ca.forward(&mut g, &store, a, b), Err(Error::Shape(_))));
    let c3 = g.constant(Tensor::zeros(&[2, 2, 3]));
    assert!(matches!(ca.forward(&mut g, &store, c3, c3), Err(Error::Shape(_))));
    let (sa, sstore) = spatial_layer(0);
    let d = g.constant(Tensor::zeros(&[3, 2, 2]));
    assert!(matches!(sa.forward(&mut g, &sstore, a, d), Err(Error::Shape(_))));
}

#[test]
fn spatial_attention_matches_loop_oracle() {
    let (sa, store) = spatial_layer(9);
    let (fi, fm) = inputs(3, 3, 2, 10);
    let mut g = Graph::new();
    let (a, b) = (g.constant(fi.clone()), g.constant(fm.clone()));
    let tr = sa.trace(&mut g, &store, a, b).unwrap();
    let (expected, gate) = oracle::spatial_attention(&store, "sa", fi.data(), fm.data(), 3, 3, 2);
    assert!(max_abs_diff(g.value(tr.out).data(), &expected) < 1e-10);
    assert!(max_abs_diff(g.value(tr.gate).data(), &gate) < 1e-10);
}

#[test]
fn zero_spatial_conv_halves_the_input() {
    let (sa, mut store) = spatial_layer(0);
    for (_, t) in store.iter_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let (fi, fm) = inputs(4, 4, 3, 1);
    let mut g = Graph::new();
    let (a, b) = (g.constant(fi.clone()), g.constant(fm));
    let tr = sa.trace(&mut g, &store, a, b).unwrap();
    assert!(g.value(tr.gate).data().iter().all(|&v| v == 0.5));
    let half: Vec<f64> = fi.data().iter().map(|v| 0.5 * v).collect();
    assert_eq!(g.value(tr.out).data(), &half[..]);
}

#[test]
fn default_arrangement_is_channel_then_spatial() {
    assert_eq!(Arrangement::default(), Arrangement::ChannelThenSpatial);
    assert_eq!(FusionConfig::new(8).arrangement, Arrangement::ChannelThenSpatial);
    for a in Arrangement::ALL {
        assert_eq!(a.key().parse::<Arrangement>().unwrap(), a);
    }
    assert!(matches!("diagonal".parse::<Arrangement>(), Err(Error::Config(_))));
}

fn fusion(arrangement: Arrangement, seed: u64) -> (MotionFusion, ParamStore) {
    let mut c = cfg(2, SoftmaxAxis::Keys, true);
    c.arrangement = arrangement;
    let f = MotionFusion::new("mfm", &c);
    let mut store = ParamStore::new();
    // Initialize both layers so every arrangement shares the same weights.
    f.channel.init(&mut store, &mut rng(seed));
    f.spatial.init(&mut store, &mut rng(seed + 1));
    randomize_biases(&mut store, seed + 2);
    (f, store)
}

#[test]
fn arrangements_compose_the_two_layers() {
    let (fi, fm) = inputs(4, 4, 2, 11);
    let run = |a: Arrangement| {
        let (f, store) = fusion(a, 12);
        let mut g = Graph::new();
        let (x, m) = (g.constant(fi.clone()), g.constant(fm.clone()));
        let out = f.fuse(&mut g, &store, x, m).unwrap();
        (g.value(out).data().to_vec(), store)
    };
    let (channel_then_spatial, store) = run(Arrangement::ChannelThenSpatial);
    let (ca, _) = oracle::channel_attention(&store, "mfm.channel", fi.data(), fm.data(), 4, 4, 2, Axis::Keys, true);
    let (sa, _) = oracle::spatial_attention(&store, "mfm.spatial", fi.data(), fm.data(), 4, 4, 2);
    let (cs, _) = oracle::spatial_attention(&store, "mfm.spatial", &ca, fm.data(), 4, 4, 2);
    let (sc, _) = oracle::channel_attention(&store, "mfm.channel", &sa, fm.data(), 4, 4, 2, Axis::Keys, true);
    let parallel: Vec<f64> = ca.iter().zip(&sa).map(|(a, b)| 0.5 * (a + b)).collect();
    assert!(max_abs_diff(&channel_then_spatial, &cs) < 1e-10);
    assert!(max_abs_diff(&run(Arrangement::SpatialThenChannel).0, &sc) < 1e-10);
    assert!(max_abs_diff(&run(Arrangement::Parallel).0, &parallel) < 1e-10);
    assert!(max_abs_diff(&run(Arrangement::ChannelOnly).0, &ca) < 1e-10);
    assert!(max_abs_diff(&run(Arrangement::SpatialOnly).0, &sa) < 1e-10);
}

#[test]
fn no_motion_with_zero_weights_scales_image_features() {
    let (f, mut store) = fusion(Arrangement::ChannelThenSpatial, 13);
    for (name, t) in store.iter_mut() {
        if !name.ends_with("log_temperature") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let (fi, _) = inputs(4, 4, 2, 14);
    let mut g = Graph::new();
    let (x, m) = (g.constant(fi.clone()), g.constant(Tensor::zeros(&[4, 4, 2])));
    let out = f.fuse(&mut g, &store, x, m).unwrap();
    let out = g.value(out).data();
    let ratio = out[0] / fi.data()[0];
    assert!(out.iter().zip(fi.data()).all(|(o, i)| (o - ratio * i).abs() < 1e-15));
}

#[test]
fn channel_attention_gradients() {
    for axis in [SoftmaxAxis::Keys, SoftmaxAxis::Queries] {
        let (ca, store) = channel_layer(2, axis, true, 15);
        let mut r = rng(16);
        let store = with_input(store, "fi", Tensor::uniform(&[2, 4, 4, 2], -1.0, 1.0, &mut r));
        let store = with_input(store, "fm", Tensor::uniform(&[2, 4, 4, 2], -1.0, 1.0, &mut r));
        grad_check(&store, 1, |g, s| {
            let (a, b) = (g.param(s, "fi")?, g.param(s, "fm")?);
            ca.forward(g, s, a, b)
        });
    }
}

#[test]
fn spatial_attention_gradients() {
    let (sa, store) = spatial_layer(17);
    let mut r = rng(18);
    let store = with_input(store, "fi", Tensor::uniform(&[2, 4, 4, 2], -1.0, 1.0, &mut r));
    let store = with_input(store, "fm", Tensor::uniform(&[2, 4, 4, 2], -1.0, 1.0, &mut r));
    grad_check(&store, 2, |g, s| {
        let (a, b) = (g.param(s, "fi")?, g.param(s, "fm")?);
        sa.forward(g, s, a, b)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), queries in any::<bool>()) {
        let axis = if queries { SoftmaxAxis::Queries } else { SoftmaxAxis::Keys };
        let (ca, store) = channel_layer(5, axis, true, seed);
        let (fi, fm) = inputs(4, 4, 5, seed ^ 1);
        let mut g = Graph::new();
        let (a, b) = (g.constant(fi), g.constant(fm));
        let tr = ca.trace(&mut g, &store, a, b).unwrap();
        let att = g.value(tr.attention[0]);
        prop_assert_eq!(att.shape(), &[5, 5]);
        for row in att.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_gate_never_amplifies(seed in any::<u64>(), scale in 0.1..50.0f64) {
        let (sa, store) = spatial_layer(seed);
        let (fi, fm) = inputs(5, 5, 3, seed ^ 2);
        let fi = fi.map(|v| v * scale);
        let mut g = Graph::new();
        let (a, b) = (g.constant(fi.clone()), g.constant(fm));
        let tr = sa.trace(&mut g, &store, a, b).unwrap();
        prop_assert!(g.value(tr.gate).data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(g.value(tr.out).data().iter().zip(fi.data()).all(|(o, i)| o.abs() <= i.abs()));
    }
}
