// SPDX-License-Identifier: MIT OR Apache-2.0

//! Heatmap localization scores, detector-based box metrics and the
//! part-of-speech relevance analysis.

pub mod detection;
pub mod pos;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{union_mask, BoundingBox};

pub use detection::{detection_eval, Detection, DetectionReport, Detector, GroundTruth, RelevanceDetector};
pub use pos::{pos_distribution, LexiconTagger, PosDistribution, PosTagger};

pub const OTSU_BINS: usize = 256;

/// Result of Otsu's method on max-normalized values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Otsu {
    /// Last background bin; values in bins `> bin` are foreground.
    pub bin: usize,
    /// Foreground cut-off in the input's units.
    pub threshold: f64,
    max: f64,
}

impl Otsu {
    pub fn is_foreground(&self, v: f64) -> bool {
        histogram_bin(v / self.max) > self.bin
    }
}

fn histogram_bin(normalized: f64) -> usize {
    ((normalized * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

/// Between-class variance of every split of a 256-bin histogram of the
/// max-normalized values; split `k` puts bins `0..=k` in the background.
pub fn between_class_variances(values: &[f64]) -> Result<(Vec<f64>, f64)> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("otsu: values must be finite and nonnegative"));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.len() < 2 || !(max > min) {
        return Err(Error::DegenerateInput("otsu needs at least two distinct values".into()));
    }
    let mut hist = [0.0f64; OTSU_BINS];
    for &v in values {
        hist[histogram_bin(v / max)] += 1.0;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * c).sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut out = Vec::with_capacity(OTSU_BINS - 1);
    for (k, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += count;
        sum0 += k as f64 * count;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            out.push(0.0);
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        out.push(w0 * w1 * (mu0 - mu1) * (mu0 - mu1) / (total * total));
    }
    Ok((out, max))
}

/// Otsu threshold over a 256-bin histogram; the first maximizing split wins.
pub fn otsu_threshold(values: &[f64]) -> Result<Otsu> {
    let (vars, max) = between_class_variances(values)?;
    let mut best = 0;
    for (k, &v) in vars.iter().enumerate() {
        if v > vars[best] {
            best = k;
        }
    }
    if vars[best] <= 0.0 {
        return Err(Error::DegenerateInput("otsu: all values fall in one histogram bin".into()));
    }
    Ok(Otsu {
        bin: best,
        threshold: (best + 1) as f64 / OTSU_BINS as f64 * max,
        max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrScores {
    pub const ZERO: PrScores = PrScores {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PrScores {
            precision,
            recall,
            f1,
        }
    }
}

/// Cell-level scores of a binarized prediction against a ground-truth mask.
pub fn mask_pr(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<PrScores> {
    if pred.dim() != gt.dim() {
        return Err(Error::invalid("prediction and ground truth grids differ"));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(PrScores::from_counts(tp, fp, fn_))
}

/// Otsu-binarized heatmap scored against the union of the boxes.
pub fn heatmap_pr(heatmap: &Array2<f64>, gt_boxes: &[BoundingBox]) -> Result<PrScores> {
    let values: Vec<f64> = heatmap.iter().copied().collect();
    let otsu = match otsu_threshold(&values) {
        Ok(o) => o,
        Err(Error::DegenerateInput(msg)) => {
            log::warn!("heatmap_pr: {msg}; scoring as zero");
            return Ok(PrScores::ZERO);
        }
        Err(e) => return Err(e),
    };
    let pred = heatmap.mapv(|v| otsu.is_foreground(v));
    mask_pr(&pred, &union_mask(gt_boxes, heatmap.dim()))
}

/// Per-sample scores and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEval {
    pub samples: Vec<PrScores>,
    pub mean: PrScores,
}

impl HeatmapEval {
    pub fn new(samples: Vec<PrScores>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = PrScores {
            precision: samples.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: samples.iter().map(|s| s.recall).sum::<f64>() / n,
            f1: samples.iter().map(|s| s.f1).sum::<f64>() / n,
        };
        HeatmapEval { samples, mean }
    }
}
