#![allow(dead_code)]

use evseg::autograd::{check_params, GradCheck, Graph, NodeId, ParamStore, Tensor};
use evseg::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stores an input tensor as a parameter so its gradient is checked too.
pub fn with_input(mut store: ParamStore, name: &str, value: Tensor) -> ParamStore {
    store.insert(name, value);
    store
}

/// Finite-difference check of `sum(out * r)` for a fixed random `r`.
pub fn grad_check<F>(store: &ParamStore, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let probe = {
        let mut g = Graph::new();
        let out = f(&mut g, store).expect("forward");
        let n = g.value(out).len();
        Tensor::uniform(&[n], -1.0, 1.0, &mut rng(seed)).into_data()
    };
    let report = check_params(store, None, &GradCheck::default(), |g, s| {
        let out = f(g, s)?;
        Ok::<_, evseg::Error>(g.dot_const(out, &probe)?)
    })
    .expect("grad check");
    assert!(report.checked > 0);
    assert!(
        report.passes(GRAD_TOL),
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    report.max_rel_error
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
