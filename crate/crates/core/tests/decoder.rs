mod common;

use common::{grad_check, rng, with_input};
use evseg::autograd::{Graph, ParamStore, Tensor};
use evseg::decoder::{predict_mask, DecoderConfig, TemporalDecoder};
use evseg::Error;
use evseg_oracles as oracle;
use proptest::prelude::*;

fn build(cfg: DecoderConfig, seed: u64) -> (TemporalDecoder, ParamStore) {
    let dec = TemporalDecoder::new("decoder", cfg).unwrap();
    let mut store = ParamStore::new();
    dec.init(&mut store, &mut rng(seed));
    let mut r = rng(seed + 1);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") || name.ends_with("embedding") {
            *t = Tensor::uniform(t.shape(), -0.5, 0.5, &mut r);
        }
    }
    (dec, store)
}

#[test]
fn logits_cover_the_input_resolution() {
    let (dec, store) = build(DecoderConfig::new(32, 5, 4), 0);
    let fused = Tensor::uniform(&[4, 16, 16, 32], -1.0, 1.0, &mut rng(1));
    let logits = dec.decode(&store, &fused).unwrap();
    assert_eq!(logits.shape(), &[64, 64, 5]);
    assert!(logits.all_finite());
}

#[test]
fn single_frame_degenerates_to_self_attention() {
    let (dec, store) = build(DecoderConfig::new(4, 3, 1), 2);
    let fused = Tensor::uniform(&[1, 8, 8, 4], -1.0, 1.0, &mut rng(3));
    let mut g = Graph::new();
    let x = g.constant(fused);
    let tr = dec.trace(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(tr.logits), &[1, 32, 32, 3]);
    let w = g.attention_weights(tr.blocks[0].attention).unwrap();
    assert_eq!(w.len(), 64 * 9);
}

#[test]
fn window_weights_sum_to_one() {
    let (dec, store) = build(DecoderConfig::new(4, 3, 4), 4);
    let fused = Tensor::uniform(&[4, 6, 5, 4], -2.0, 2.0, &mut rng(5));
    let mut g = Graph::new();
    let x = g.constant(fused);
    let tr = dec.trace(&mut g, &store, x).unwrap();
    for b in &tr.blocks {
        let w = g.attention_weights(b.attention).unwrap();
        let sites = 4 * 9;
        assert_eq!(w.len(), 30 * sites);
        for row in w.chunks(sites) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn wrong_temporal_length_is_a_shape_error() {
    let (dec, store) = build(DecoderConfig::new(4, 3, 4), 0);
    let err = dec.decode(&store, &Tensor::zeros(&[3, 4, 4, 4])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn reference_order_is_carried_by_embeddings() {
    let (dec, store) = build(DecoderConfig::new(4, 3, 4), 6);
    let fused = Tensor::uniform(&[4, 4, 4, 4], -1.0, 1.0, &mut rng(7));
    let base = dec.decode(&store, &fused).unwrap();
    let perm = [0, 3, 1, 2];
    let frames: Vec<Tensor> = perm.iter().map(|&i| fused.frame(i).unwrap()).collect();
    let permuted = Tensor::stack(&frames).unwrap();
    let table = store.get("decoder.temporal_embedding").unwrap();
    let rows: Vec<Tensor> = perm.iter().map(|&i| table.frame(i).unwrap()).collect();
    let mut pstore = store.clone();
    pstore.insert("decoder.temporal_embedding", Tensor::stack(&rows).unwrap());
    let out = dec.decode(&pstore, &permuted).unwrap();
    assert!(out.max_abs_diff(&base) < 1e-12);
    // Permuting features alone changes the result.
    assert!(dec.decode(&store, &permuted).unwrap().max_abs_diff(&base) > 1e-9);
}

#[test]
fn argmax_examples() {
    let logits = Tensor::new(&[1, 3, 3], vec![0.1, 0.9, 0.3, 2.0, 2.0, -1.0, -1.0, 5.0, 5.0]).unwrap();
    let mask = predict_mask(&logits).unwrap();
    assert_eq!(mask.labels, vec![1, 0, 1]);
    let nan = Tensor::new(&[1, 1, 2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(predict_mask(&nan), Err(Error::Numeric(_))));
}

#[test]
fn decoder_block_gradients() {
    let (dec, store) = build(DecoderConfig::new(3, 2, 3), 8);
    let mut r = rng(9);
    let store = with_input(store, "memory", Tensor::uniform(&[3, 3, 3, 3], -1.0, 1.0, &mut r));
    let store = with_input(store, "query", Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut r));
    let block = &dec.blocks[0];
    let mut only = ParamStore::new();
    for (n, t) in store.iter() {
        if n.starts_with("decoder.block1") || n == "memory" || n == "query" {
            only.insert(n, t.clone());
        }
    }
    grad_check(&only, 3, |g, s| {
        let (q, m) = (g.param(s, "query")?, g.param(s, "memory")?);
        Ok(block.trace(g, s, q, m)?.out)
    });
}

#[test]
fn full_decoder_gradients() {
    let (dec, store) = build(DecoderConfig::new(3, 2, 2), 10);
    let store = with_input(store, "fused", Tensor::uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng(11)));
    grad_check(&store, 4, |g, s| {
        let x = g.param(s, "fused")?;
        dec.forward(g, s, x)
    });
}

proptest! {
    #[test]
    fn argmax_matches_loop_oracle(vals in prop::collection::vec(-3i32..3, 4 * 5 * 4)) {
        // Small integer logits produce plenty of exact ties.
        let data: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
        let logits = Tensor::new(&[4, 5, 4], data.clone()).unwrap();
        prop_assert_eq!(predict_mask(&logits).unwrap().labels, oracle::argmax(&data, 4));
    }
}
