//! Trains and evaluates every (arm, seed) pair on the same data and budget.

use std::path::Path;

use evseg::model::FusionArm;

use crate::config::Config;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::io;
use crate::parallel::par_map;
use crate::report::{self, AblationReport, AblationRow};
use crate::train;

/// Arms accepted by `ablate`, by config key.
pub fn parse_arms(list: &str) -> Result<Vec<FusionArm>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<FusionArm>()
                .map_err(|_| Error::Config(format!("unknown ablation arm {s:?}")))
        })
        .collect()
}

/// Trains and evaluates one run, writing it under `out`.
pub fn run_one(cfg: &Config, data: &Dataset, out: &Path) -> Result<AblationRow> {
    let outcome = train::train(cfg, data, out)?;
    let model = evseg::model::Model::new(&cfg.model_config())?;
    let (metrics, _) = eval::evaluate(&model, &outcome.store, &data.val, &cfg.train.offsets, &cfg.eval)?;
    io::write_json(&out.join(report::EVAL_FILE), &metrics)?;
    Ok(AblationRow {
        arm: cfg.mfm.arrangement.to_string(),
        seed: cfg.train.seed,
        miou: metrics.miou,
        wiou: metrics.wiou,
        mvc8: metrics.mvc8,
        mvc16: metrics.mvc16,
        param_count: metrics.param_count,
        flop_estimate: metrics.flop_estimate,
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Runs `cfg.ablate.arms x cfg.ablate.seeds`; run directories are
/// `out/<arm>/seed_<n>/`.
pub fn run_ablation(cfg: &Config, data: &Dataset, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    if cfg.ablate.arms.is_empty() || cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one arm and one seed".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Data(format!("{}: no validation clips", data.root.display())));
    }
    io::create_dir(out)?;
    let runs: Vec<Config> = cfg
        .ablate
        .arms
        .iter()
        .flat_map(|&arm| cfg.ablate.seeds.iter().map(move |&s| cfg.with_arm(arm).with_seed(s)))
        .collect();
    let rows = par_map(&runs, |run| {
        let dir = out.join(report::run_dir_name(&run.mfm.arrangement.to_string(), run.train.seed));
        log::info!("training {}", dir.display());
        run_one(run, data, &dir)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let report = AblationReport::new(rows, cfg.train.total_iters, data.train.len(), data.val.len());
    report::write_ablation_report(out, &report)?;
    Ok(report)
}
