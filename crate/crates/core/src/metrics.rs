//! Evaluation metrics.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::math;

/// Image-plane centre of a boulder: `u` along columns, `v` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoB {
    pub u: f64,
    pub v: f64,
}

impl CoB {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Euclidean CoB error in pixels.
pub fn cob_error(estimate: CoB, truth: CoB) -> f64 {
    let du = estimate.u - truth.u;
    let dv = estimate.v - truth.v;
    math::sqrt(du * du + dv * dv)
}

/// Per-class intersection-over-union counts.
#[derive(Debug, Clone, PartialEq)]
pub struct IouCounts {
    pub intersection: Vec<usize>,
    pub union: Vec<usize>,
}

impl IouCounts {
    pub fn compute(pred: &[u8], truth: &[u8], n_classes: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(dim_err!("mask sizes differ: {} vs {}", pred.len(), truth.len()));
        }
        let mut inter = vec![0; n_classes];
        let mut uni = vec![0; n_classes];
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= n_classes || t >= n_classes {
                return Err(Error::Input(alloc::format!("class index out of range for {} classes", n_classes)));
            }
            if p == t {
                inter[p] += 1;
                uni[p] += 1;
            } else {
                uni[p] += 1;
                uni[t] += 1;
            }
        }
        Ok(Self { intersection: inter, union: uni })
    }

    /// IOU of one class; `None` when the class is absent from both masks.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        (self.union[c] > 0).then(|| self.intersection[c] as f64 / self.union[c] as f64)
    }

    /// Mean over the classes present in either mask.
    pub fn mean(&self) -> f64 {
        let ious: Vec<f64> = (0..self.union.len()).filter_map(|c| self.class_iou(c)).collect();
        if ious.is_empty() {
            // both masks empty of every class only happens for zero pixels
            return 1.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Mean intersection-over-union; classes absent from both masks are
/// excluded from the mean.
pub fn miou(pred: &[u8], truth: &[u8], n_classes: usize) -> Result<f64> {
    Ok(IouCounts::compute(pred, truth, n_classes)?.mean())
}

/// IOU of the boulder class alone, reported alongside [`miou`]. An image with
/// no boulder in either mask scores 1.
pub fn boulder_iou(pred: &[u8], truth: &[u8]) -> Result<f64> {
    Ok(IouCounts::compute(pred, truth, 2)?.class_iou(1).unwrap_or(1.0))
}

pub fn accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(dim_err!("mask sizes differ: {} vs {}", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Input("empty masks".into()));
    }
    let same = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(same as f64 / pred.len() as f64)
}

/// Mean and (population) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { mean: f64::NAN, std: f64::NAN, count: 0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Summary { mean, std: math::sqrt(var), count: values.len() }
}

/// Per-sample values of one metric plus their dataset-level summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub metric: alloc::string::String,
    pub sample_ids: Vec<alloc::string::String>,
    pub values: Vec<f64>,
    pub summary: Summary,
}

impl EvalRecord {
    pub fn new(metric: &str, sample_ids: Vec<alloc::string::String>, values: Vec<f64>) -> Self {
        let summary = summarize(&values);
        Self { metric: metric.into(), sample_ids, values, summary }
    }
}

/// Histogram of a set of weights, with relative (not density) probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub bias: Option<Vec<f64>>,
}

pub fn histogram(values: &[f64], n_bins: usize, bias: Option<Vec<f64>>) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Input("histogram of an empty selection".into()));
    }
    if n_bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let n = values.len() as f64;
    let s = summarize(values);
    Ok(Histogram {
        edges,
        probabilities: counts.iter().map(|&c| c as f64 / n).collect(),
        mean: s.mean,
        variance: s.std * s.std,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cob_examples() {
        assert_eq!(cob_error(CoB::new(3.0, 4.0), CoB::new(0.0, 0.0)), 5.0);
        assert_eq!(cob_error(CoB::new(1.5, -2.0), CoB::new(1.5, -2.0)), 0.0);
        let errs = [
            cob_error(CoB::new(1.0, 0.0), CoB::new(0.0, 0.0)),
            cob_error(CoB::new(0.0, 2.0), CoB::new(0.0, 0.0)),
        ];
        assert_eq!(summarize(&errs).mean, 1.5);
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        assert_eq!(miou(&[0, 0, 0], &[1, 1, 1], 2).unwrap(), 0.0);
        let m = miou(&[1, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert!((m - 7.0 / 12.0).abs() < 1e-12);
        // class 1 absent from both: only class 0 counts
        assert_eq!(miou(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert!(miou(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 1], &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap(), 0.75);
    }

    #[test]
    fn histogram_of_constant_is_single_bin() {
        let h = histogram(&[0.3; 50], 10, None).unwrap();
        assert_eq!(h.probabilities.iter().filter(|&&p| p > 0.0).count(), 1);
        assert!((h.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(histogram(&[], 4, None).is_err());
    }
}
