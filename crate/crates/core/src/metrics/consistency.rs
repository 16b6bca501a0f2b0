use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SegMask;
use crate::error::{Error, Result};

/// Which consistency set normalizes the video-consistency ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VcDenominator {
    #[default]
    Gt,
    Pred,
}

impl FromStr for VcDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(VcDenominator::Gt),
            "pred" => Ok(VcDenominator::Pred),
            other => Err(Error::Config(format!(
                "unknown vc denominator {other:?} (expected gt or pred)"
            ))),
        }
    }
}

impl fmt::Display for VcDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VcDenominator::Gt => "gt",
            VcDenominator::Pred => "pred",
        })
    }
}

/// Per-pixel membership of the consistency sets of one window. Pixels whose
/// ground truth is ignored in any frame belong to no set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsistencySets {
    /// Ground-truth label constant across the window.
    pub gt: Vec<bool>,
    /// Predicted label constant across the window.
    pub pred: Vec<bool>,
    /// In both sets with matching labels.
    pub agree: Vec<bool>,
}

impl ConsistencySets {
    fn count(v: &[bool]) -> usize {
        v.iter().filter(|&&b| b).count()
    }

    pub fn ratio(&self, denom: VcDenominator) -> f64 {
        let d = match denom {
            VcDenominator::Gt => Self::count(&self.gt),
            VcDenominator::Pred => Self::count(&self.pred),
        };
        if d == 0 {
            1.0
        } else {
            Self::count(&self.agree) as f64 / d as f64
        }
    }
}

fn check_window(gts: &[SegMask], preds: &[SegMask]) -> Result<()> {
    if gts.is_empty() || gts.len() != preds.len() {
        return Err(Error::Shape(format!(
            "need equally many non-zero gt and pred masks, got {} and {}",
            gts.len(),
            preds.len()
        )));
    }
    let first = &gts[0];
    if let Some(m) = gts.iter().chain(preds).find(|m| !m.same_shape(first)) {
        return Err(Error::Shape(format!(
            "mask {}x{} differs from {}x{}",
            m.height, m.width, first.height, first.width
        )));
    }
    Ok(())
}

pub fn consistency_sets(gts: &[SegMask], preds: &[SegMask]) -> Result<ConsistencySets> {
    check_window(gts, preds)?;
    let n = gts[0].labels.len();
    let (g0, p0) = (&gts[0], &preds[0]);
    let mut sets = ConsistencySets {
        gt: vec![false; n],
        pred: vec![false; n],
        agree: vec![false; n],
    };
    for i in 0..n {
        if gts.iter().any(|g| g.is_ignored(i)) {
            continue;
        }
        let gc = gts.iter().all(|g| g.labels[i] == g0.labels[i]);
        let pc = preds.iter().all(|p| p.labels[i] == p0.labels[i]);
        sets.gt[i] = gc;
        sets.pred[i] = pc;
        sets.agree[i] = gc && pc && g0.labels[i] == p0.labels[i];
    }
    Ok(sets)
}

/// Video consistency of one window of `t` frames.
pub fn video_consistency(gts: &[SegMask], preds: &[SegMask], denom: VcDenominator) -> Result<f64> {
    Ok(consistency_sets(gts, preds)?.ratio(denom))
}

/// Mean VC over every stride-1 window of a clip; `None` when the clip is
/// shorter than the window.
pub fn mvc(gts: &[SegMask], preds: &[SegMask], window: usize, denom: VcDenominator) -> Result<Option<f64>> {
    let mut acc = MvcAccumulator::new(window, denom);
    acc.add_clip(gts, preds)?;
    Ok(acc.value())
}

/// Running stride-1 window mean over many clips; each window counts once.
///
/// Window values are kept and summed in sorted order, so the result does not
/// depend on the order clips were added or accumulators merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvcAccumulator {
    pub window: usize,
    pub denominator: VcDenominator,
    pub values: Vec<f64>,
    pub skipped_clips: u64,
}

impl MvcAccumulator {
    pub fn new(window: usize, denominator: VcDenominator) -> Self {
        MvcAccumulator {
            window,
            denominator,
            values: Vec::new(),
            skipped_clips: 0,
        }
    }

    pub fn add_clip(&mut self, gts: &[SegMask], preds: &[SegMask]) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("mVC window must be positive".into()));
        }
        check_window(gts, preds)?;
        if gts.len() < self.window {
            self.skipped_clips += 1;
            log::warn!(
                "clip of {} frames is shorter than the {}-frame window; skipped",
                gts.len(),
                self.window
            );
            return Ok(());
        }
        for s in 0..=gts.len() - self.window {
            let e = s + self.window;
            self.values
                .push(video_consistency(&gts[s..e], &preds[s..e], self.denominator)?);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MvcAccumulator) -> Result<()> {
        if other.window != self.window || other.denominator != self.denominator {
            return Err(Error::Config("cannot merge mVC accumulators with different settings".into()));
        }
        self.values.extend_from_slice(&other.values);
        self.skipped_clips += other.skipped_clips;
        Ok(())
    }

    pub fn windows(&self) -> u64 {
        self.values.len() as u64
    }

    pub fn value(&self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let mut sorted = self.values.clone();
        sorted.sort_by(f64::total_cmp);
        Some(sorted.iter().sum::<f64>() / sorted.len() as f64)
    }
}
