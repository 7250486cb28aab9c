//! Scoring primitives: mean absolute error, hotspot extraction, and the
//! hotspot F1 score.

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::{Tensor, TensorError};

/// Hotspot threshold as a fraction of each map's own maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HotspotConfig {
    pub ratio: f64,
}

impl Default for HotspotConfig {
    fn default() -> Self {
        HotspotConfig { ratio: 0.9 }
    }
}

impl HotspotConfig {
    pub fn validate(&self) -> Result<(), alloc::string::String> {
        if self.ratio > 0.0 && self.ratio <= 1.0 {
            Ok(())
        } else {
            Err(format!("hotspot ratio must lie in (0, 1], got {}", self.ratio))
        }
    }
}

/// Mean absolute error in the maps' units (millivolts here).
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mae",
            detail: format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        });
    }
    let n = pred.numel();
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / n as f64)
}

/// mask_i = (map_i >= ratio * max(map)). A map with max <= 0 yields an
/// all-false mask: valid IR maps are positive, so this only guards the
/// degenerate zero map.
pub fn hotspot_mask(map: &Tensor, cfg: HotspotConfig) -> Vec<bool> {
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return alloc::vec![false; map.numel()];
    }
    let thr = cfg.ratio * max;
    map.data().iter().map(|v| *v >= thr).collect()
}

/// F1 plus the raw counts. Two empty masks agree vacuously: F1 = 1.
pub fn f1(pred_mask: &[bool], true_mask: &[bool]) -> Result<(f64, u64, u64, u64), TensorError> {
    if pred_mask.len() != true_mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "f1",
            detail: format!("mask lengths {} vs {}", pred_mask.len(), true_mask.len()),
        });
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (p, t) in pred_mask.iter().zip(true_mask) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let score = if tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64)
    };
    Ok((score, tp, fp, fneg))
}

/// Arithmetic mean and population standard deviation.
pub fn mean_and_pop_std(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty(), "empty sample");
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}
