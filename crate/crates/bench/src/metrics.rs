//! Centre error, overlap and the precision / success curves.

use anyhow::{bail, Result};
use dnt_core::Rect;
use serde::Serialize;

pub const PRECISION_THRESHOLDS: usize = 51;
pub const SUCCESS_THRESHOLDS: usize = 21;

/// Precision threshold `i` in pixels.
pub fn precision_threshold(i: usize) -> f64 {
    i as f64
}

/// Success threshold `i`, `0, 0.05, ..., 1`.
pub fn success_threshold(i: usize) -> f64 {
    i as f64 / 20.0
}

pub fn center_error(a: &Rect, b: &Rect) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Intersection over union; zero when the union is empty.
pub fn overlap(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricCurves {
    pub precision: Vec<f64>,
    pub success: Vec<f64>,
    pub prec_at_20: f64,
    pub auc: f64,
}

impl MetricCurves {
    fn from_curves(precision: Vec<f64>, success: Vec<f64>) -> Self {
        let auc = success.iter().sum::<f64>() / success.len() as f64;
        MetricCurves { prec_at_20: precision[20], auc, precision, success }
    }

    /// Precision non-decreasing, success non-increasing, all in `[0, 1]`.
    pub fn check(&self) -> Result<()> {
        let in_range = |v: &[f64]| v.iter().all(|x| (0.0..=1.0).contains(x));
        if self.precision.len() != PRECISION_THRESHOLDS || self.success.len() != SUCCESS_THRESHOLDS {
            bail!("curve lengths {} / {}", self.precision.len(), self.success.len());
        }
        if !in_range(&self.precision) || !in_range(&self.success) {
            bail!("curve value outside [0, 1]");
        }
        if self.precision.windows(2).any(|w| w[1] < w[0]) {
            bail!("precision curve decreases");
        }
        if self.success.windows(2).any(|w| w[1] > w[0]) {
            bail!("success curve increases");
        }
        Ok(())
    }

    /// Threshold-wise mean of several curves.
    pub fn average(curves: &[MetricCurves]) -> Result<MetricCurves> {
        if curves.is_empty() {
            bail!("nothing to average");
        }
        let n = curves.len() as f64;
        let mean = |pick: &dyn Fn(&MetricCurves) -> &Vec<f64>, len: usize| -> Vec<f64> {
            (0..len).map(|i| curves.iter().map(|c| pick(c)[i]).sum::<f64>() / n).collect()
        };
        Ok(MetricCurves::from_curves(
            mean(&|c| &c.precision, PRECISION_THRESHOLDS),
            mean(&|c| &c.success, SUCCESS_THRESHOLDS),
        ))
    }
}

/// Curves of `results` against `truth`, frame by frame.
pub fn curves(results: &[Rect], truth: &[Rect]) -> Result<MetricCurves> {
    if results.len() != truth.len() {
        bail!("{} result rectangles for {} ground-truth frames", results.len(), truth.len());
    }
    if results.is_empty() {
        bail!("no frames to evaluate");
    }
    let n = results.len() as f64;
    let errors: Vec<f64> = results.iter().zip(truth).map(|(r, t)| center_error(r, t)).collect();
    let overlaps: Vec<f64> = results.iter().zip(truth).map(|(r, t)| overlap(r, t)).collect();
    let precision = (0..PRECISION_THRESHOLDS)
        .map(|i| errors.iter().filter(|&&e| e <= precision_threshold(i)).count() as f64 / n)
        .collect();
    let success = (0..SUCCESS_THRESHOLDS)
        .map(|i| overlaps.iter().filter(|&&o| o > success_threshold(i)).count() as f64 / n)
        .collect();
    Ok(MetricCurves::from_curves(precision, success))
}
