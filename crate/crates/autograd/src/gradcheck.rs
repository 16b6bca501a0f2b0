//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

/// Settings for [`check_params`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Finite-difference half step.
    pub step: f64,
    /// Lower bound on the relative-error denominator so that gradients that are
    /// zero up to round-off do not dominate.
    pub floor: f64,
    /// Upper bound on checked coordinates per tensor (evenly strided).
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-6,
            max_coords: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(param, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Compares analytic gradients of the scalar produced by `f` against central
/// differences, for every tensor in `store` (or only those in `names`).
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_params<F, E>(
    store: &ParamStore,
    names: Option<&[&str]>,
    cfg: &GradCheck,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, E>,
    E: From<TensorError>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .params()
        .map(|(n, t)| (n.to_string(), t.into_data()))
        .collect();

    let selected: Vec<String> = match names {
        Some(ns) => ns.iter().map(|s| s.to_string()).collect(),
        None => store.names().map(str::to_string).collect(),
    };

    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.scalar_value(l))
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for name in selected {
        let len = store.require(&name)?.len();
        let an = analytic
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; len]);
        let stride = len.div_ceil(cfg.max_coords.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let orig = store.require(&name)?.data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = an[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
