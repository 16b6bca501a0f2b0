use serde::Serialize;

use crate::checkpoint::Manifest;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::LayerCost;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    /// Scalars listed in the checkpoint manifest.
    pub param_count: u64,
    /// Sum of closed-form per-layer parameter counts.
    pub analytic_param_count: u64,
    pub macs: u64,
    /// `2 * macs`.
    pub flop_estimate: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn from_layers(layers: Vec<LayerCost>, manifest: &Manifest) -> Self {
        let macs = layers.iter().map(|l| l.macs).sum();
        CostReport {
            param_count: manifest.param_count(),
            analytic_param_count: layers.iter().map(|l| l.params).sum(),
            macs,
            flop_estimate: 2 * macs,
            layers,
        }
    }
}

/// Parameter and FLOP totals of a model at its declared input size.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<CostReport> {
    let model = Model::new(cfg)?;
    let manifest = Manifest::describe(&model.init_params(0));
    Ok(CostReport::from_layers(
        model.layer_costs(cfg.height, cfg.width),
        &manifest,
    ))
}
