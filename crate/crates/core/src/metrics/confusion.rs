use serde::{Deserialize, Serialize};

use super::SegMask;
use crate::error::{Error, Result};

/// `K x K` pixel counts indexed `[gt][pred]`. Accumulators merge by addition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes with empty union.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with non-empty union; `None` when there are none.
    pub miou: Option<f64>,
    /// Ground-truth pixel-share weighted IoU; `None` without labelled pixels.
    pub wiou: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one frame; ground-truth pixels equal to the ignore index are
    /// skipped.
    pub fn accumulate(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.num_classes;
        gt.validate(k)?;
        for (i, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
            if g == gt.ignore_index {
                continue;
            }
            if p as usize >= k {
                return Err(Error::Data(format!("predicted label {p} at pixel {i} outside [0, {k})")));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        let k = self.num_classes;
        let total = self.total();
        let mut per_class = Vec::with_capacity(k);
        let (mut sum, mut valid, mut weighted) = (0.0, 0usize, 0.0);
        for c in 0..k {
            let tp = self.get(c, c);
            let gt_c: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred_c: u64 = (0..k).map(|g| self.get(g, c)).sum();
            let union = gt_c + pred_c - tp;
            if union == 0 {
                per_class.push(None);
                continue;
            }
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            valid += 1;
            weighted += gt_c as f64 / total as f64 * iou;
        }
        IouReport {
            per_class,
            miou: (valid > 0).then(|| sum / valid as f64),
            wiou: (total > 0).then_some(weighted),
        }
    }
}
