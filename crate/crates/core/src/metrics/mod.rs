//! Segmentation metrics: confusion-matrix IoU, video consistency and model
//! cost accounting.

mod confusion;
mod consistency;
mod cost;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use confusion::{ConfusionMatrix, IouReport};
pub use consistency::{
    consistency_sets, mvc, video_consistency, ConsistencySets, MvcAccumulator, VcDenominator,
};
pub use cost::{count_params_flops, CostReport};

pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class labels of one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    /// Row-major labels.
    pub labels: Vec<u8>,
    /// Label excluded from every metric.
    pub ignore_index: u8,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(SegMask {
            height,
            width,
            labels,
            ignore_index: IGNORE_INDEX,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        SegMask {
            height,
            width,
            labels: vec![label; height * width],
            ignore_index: IGNORE_INDEX,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.labels[i] == self.ignore_index
    }

    pub fn same_shape(&self, other: &SegMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Checks every label is below `k` or the ignore index.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != self.ignore_index && l as usize >= k)
        {
            Some(i) => Err(Error::Data(format!(
                "label {} at pixel {i} outside [0, {k})",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Aggregate evaluation results. `None` marks an undefined value (no valid
/// class, no full-length window).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub wiou: Option<f64>,
    pub mvc8: Option<f64>,
    pub mvc16: Option<f64>,
    pub param_count: u64,
    pub flop_estimate: u64,
    /// Stride-1 windows contributing to mVC8 / mVC16.
    pub mvc_windows: [u64; 2],
    /// Clips shorter than 8 / 16 frames.
    pub mvc_skipped_clips: [u64; 2],
    pub vc_denominator: VcDenominator,
    pub flop_convention: String,
}

pub const FLOP_CONVENTION: &str = "FLOPs = 2 x multiply-adds of conv, projection and attention products";
