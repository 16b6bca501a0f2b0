//! Model evaluation and metric aggregation over clips.

use std::path::Path;

use evseg::autograd::ParamStore;
use evseg::checkpoint::Manifest;
use evseg::metrics::{
    count_params_flops, ConfusionMatrix, CostReport, MetricsReport, MvcAccumulator, SegMask,
    VcDenominator, FLOP_CONVENTION,
};
use evseg::model::{Model, ModelConfig};

use crate::config::EvalConfig;
use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::io;
use crate::parallel::par_map;

/// mVC window lengths carried by [`MetricsReport`].
pub const MVC_WINDOWS: [usize; 2] = [8, 16];

/// Mergeable per-clip metric state.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsAccumulator {
    pub confusion: ConfusionMatrix,
    /// One accumulator per entry of [`MVC_WINDOWS`]; `None` when not requested.
    pub mvc: [Option<MvcAccumulator>; 2],
    pub denominator: VcDenominator,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize, cfg: &EvalConfig) -> Result<Self> {
        if let Some(w) = cfg.windows.iter().find(|w| !MVC_WINDOWS.contains(w)) {
            return Err(Error::Config(format!(
                "unsupported mVC window {w}; choose from {MVC_WINDOWS:?}"
            )));
        }
        Ok(MetricsAccumulator {
            confusion: ConfusionMatrix::new(num_classes),
            mvc: MVC_WINDOWS.map(|w| {
                cfg.windows
                    .contains(&w)
                    .then(|| MvcAccumulator::new(w, cfg.vc_denominator))
            }),
            denominator: cfg.vc_denominator,
        })
    }

    pub fn add_clip(&mut self, gts: &[SegMask], preds: &[SegMask]) -> Result<()> {
        if gts.len() != preds.len() {
            return Err(Error::Data(format!(
                "{} ground-truth frames but {} predictions",
                gts.len(),
                preds.len()
            )));
        }
        for (p, g) in preds.iter().zip(gts) {
            self.confusion.accumulate(p, g)?;
        }
        for acc in self.mvc.iter_mut().flatten() {
            acc.add_clip(gts, preds)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) -> Result<()> {
        self.confusion.merge(&other.confusion)?;
        for (a, b) in self.mvc.iter_mut().zip(&other.mvc) {
            match (a, b) {
                (Some(a), Some(b)) => a.merge(b)?,
                (None, None) => {}
                _ => return Err(Error::Config("cannot merge accumulators with different windows".into())),
            }
        }
        Ok(())
    }

    pub fn report(&self, cost: &CostReport) -> MetricsReport {
        let iou = self.confusion.iou();
        let value = |i: usize| self.mvc[i].as_ref().and_then(MvcAccumulator::value);
        let count = |i: usize, f: fn(&MvcAccumulator) -> u64| self.mvc[i].as_ref().map_or(0, f);
        MetricsReport {
            per_class_iou: iou.per_class,
            miou: iou.miou,
            wiou: iou.wiou,
            mvc8: value(0),
            mvc16: value(1),
            param_count: cost.param_count,
            flop_estimate: cost.flop_estimate,
            mvc_windows: [count(0, MvcAccumulator::windows), count(1, MvcAccumulator::windows)],
            mvc_skipped_clips: [count(0, |a| a.skipped_clips), count(1, |a| a.skipped_clips)],
            vc_denominator: self.denominator,
            flop_convention: FLOP_CONVENTION.to_string(),
        }
    }
}

/// Costs of `model` with its parameter count read from `store`'s manifest.
pub fn model_cost(model: &Model, store: &ParamStore) -> CostReport {
    CostReport::from_layers(
        model.layer_costs(model.cfg.height, model.cfg.width),
        &Manifest::describe(store),
    )
}

/// Costs of a freshly initialized model of `cfg`.
pub fn config_cost(cfg: &ModelConfig) -> Result<CostReport> {
    Ok(count_params_flops(cfg)?)
}

/// Predicted masks for every frame of `clip`.
pub fn predict_clip(model: &Model, store: &ParamStore, clip: &Clip, offsets: &[usize]) -> Result<Vec<SegMask>> {
    (0..clip.len())
        .map(|t| {
            let (images, events) = clip.window(t, offsets)?;
            let ev = model.uses_events().then_some(&events);
            Ok(model.predict(store, &images, ev)?.1)
        })
        .collect()
}

/// Predictions and metrics of `model` over `clips`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    clips: &[Clip],
    offsets: &[usize],
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<Vec<SegMask>>)> {
    let k = model.cfg.num_classes;
    let per_clip = par_map(clips, |clip| -> Result<(MetricsAccumulator, Vec<SegMask>)> {
        let preds = predict_clip(model, store, clip, offsets)?;
        let mut acc = MetricsAccumulator::new(k, cfg)?;
        acc.add_clip(&clip.masks, &preds)?;
        Ok((acc, preds))
    });
    let mut total = MetricsAccumulator::new(k, cfg)?;
    let mut preds = Vec::with_capacity(clips.len());
    for r in per_clip {
        let (acc, p) = r?;
        total.merge(&acc)?;
        preds.push(p);
    }
    Ok((total.report(&model_cost(model, store)), preds))
}

/// Writes `preds[i]` as mask PNGs under `dir/<clip name>/`.
pub fn write_predictions(dir: &Path, clips: &[Clip], preds: &[Vec<SegMask>]) -> Result<()> {
    for (clip, masks) in clips.iter().zip(preds) {
        let d = dir.join(&clip.name);
        io::create_dir(&d)?;
        for (t, m) in masks.iter().enumerate() {
            io::write_mask(&d.join(io::frame_name(t)), m)?;
        }
    }
    Ok(())
}

fn read_masks(dir: &Path) -> Result<Vec<SegMask>> {
    io::list_pngs(dir)?.iter().map(|p| io::read_mask(p)).collect()
}

/// Metrics of mask PNGs in `pred_dir/<clip>/` against `gt_dir/<clip>/masks/`
/// (or `gt_dir/<clip>/` when there is no `masks` subdirectory).
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    num_classes: usize,
    cfg: &EvalConfig,
    cost: &CostReport,
) -> Result<MetricsReport> {
    let clips = io::list_dirs(pred_dir)?;
    if clips.is_empty() {
        return Err(Error::Data(format!("{}: no clip directories", pred_dir.display())));
    }
    let mut acc = MetricsAccumulator::new(num_classes, cfg)?;
    for clip in clips {
        let name = clip.file_name().expect("listed directory");
        let gt_clip = gt_dir.join(name);
        let gt_masks = if gt_clip.join("masks").is_dir() {
            gt_clip.join("masks")
        } else {
            gt_clip
        };
        let preds = read_masks(&clip)?;
        let gts = read_masks(&gt_masks)?;
        for m in preds.iter().chain(&gts) {
            m.validate(num_classes)?;
        }
        acc.add_clip(&gts, &preds)
            .map_err(|e| Error::Data(format!("{}: {e}", clip.display())))?;
    }
    Ok(acc.report(cost))
}
