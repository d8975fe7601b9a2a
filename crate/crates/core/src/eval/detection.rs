// SPDX-License-Identifier: MIT OR Apache-2.0

//! COCO-style average precision and recall of detector output against
//! layout boxes (all areas, up to 100 detections per image, no crowd).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::otsu_threshold;
use crate::layout::BoundingBox;
use crate::model::{Encoder, Image};
use crate::relevance::compute_relevance;

pub const MAX_DETECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// Object detector adapter.
pub trait Detector: Send + Sync {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>>;
}

/// One box per label: the extent of the Otsu foreground of the label's patch
/// heatmap, scored by image-text similarity.
pub struct RelevanceDetector {
    encoder: std::sync::Arc<dyn Encoder>,
    labels: Vec<String>,
}

impl RelevanceDetector {
    pub fn new(encoder: std::sync::Arc<dyn Encoder>, labels: Vec<String>) -> Self {
        RelevanceDetector { encoder, labels }
    }

    fn detect_label(&self, label: &str, image: &Image) -> Result<Option<Detection>> {
        let tokens = self.encoder.tokenize(label)?;
        let (sim, trace) = self.encoder.encode_and_trace(&tokens, image)?;
        let hm = compute_relevance(&trace)?.patch_heatmap;
        let otsu = match otsu_threshold(&hm.iter().copied().collect::<Vec<_>>()) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("no detection for `{label}`: {e}");
                return Ok(None);
            }
        };
        let (rows, cols) = hm.dim();
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for ((r, c), &v) in hm.indexed_iter() {
            if otsu.is_foreground(v) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
        if r0 == usize::MAX {
            return Ok(None);
        }
        let bbox = BoundingBox::new(
            c0 as f64 / cols as f64,
            r0 as f64 / rows as f64,
            (c1 + 1) as f64 / cols as f64,
            (r1 + 1) as f64 / rows as f64,
        )?;
        Ok(Some(Detection {
            label: label.to_string(),
            bbox,
            score: sim,
        }))
    }
}

impl Detector for RelevanceDetector {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        let mut out = Vec::new();
        for label in &self.labels {
            out.extend(self.detect_label(label, image)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub ap: f64,
    pub ap50: f64,
    pub ar: f64,
}

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    linspace(0.5, 0.95, 10)
}

fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    let step = (stop - start) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * step + start).collect();
    v[n - 1] = stop;
    v
}

struct CategoryEval {
    /// `[threshold]` -> (scores, matched flags) over all images.
    per_threshold: Vec<(Vec<f64>, Vec<bool>)>,
    n_gt: usize,
}

fn evaluate_image(
    gts: &[&BoundingBox],
    dets: &[&Detection],
    thresholds: &[f64],
) -> Vec<Vec<bool>> {
    thresholds
        .iter()
        .map(|&t| {
            let mut gt_taken = vec![false; gts.len()];
            dets.iter()
                .map(|d| {
                    let mut iou = t.min(1.0 - 1e-10);
                    let mut m = None;
                    for (g, gb) in gts.iter().enumerate() {
                        if gt_taken[g] {
                            continue;
                        }
                        let v = d.bbox.iou(gb);
                        if v < iou {
                            continue;
                        }
                        iou = v;
                        m = Some(g);
                    }
                    if let Some(g) = m {
                        gt_taken[g] = true;
                    }
                    m.is_some()
                })
                .collect()
        })
        .collect()
}

/// Precision interpolated at 101 recall points.
fn average_precision(scores: &[f64], matched: &[bool], n_gt: usize) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &i in &order {
        if matched[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let rec_thresholds = linspace(0.0, 1.0, 101);
    let mut sum = 0.0;
    for r in rec_thresholds {
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    let final_recall = recall.last().copied().unwrap_or(0.0);
    (sum / 101.0, final_recall)
}

/// `images[i]` pairs ground truth with detections for one image.
pub fn detection_eval(images: &[(Vec<GroundTruth>, Vec<Detection>)]) -> DetectionReport {
    let thresholds = iou_thresholds();
    let labels: BTreeSet<&str> = images
        .iter()
        .flat_map(|(g, _)| g.iter().map(|x| x.label.as_str()))
        .collect();
    let mut cats = Vec::new();
    for label in labels {
        let mut ce = CategoryEval {
            per_threshold: vec![(Vec::new(), Vec::new()); thresholds.len()],
            n_gt: 0,
        };
        for (gts, dets) in images {
            let g: Vec<&BoundingBox> = gts.iter().filter(|x| x.label == label).map(|x| &x.bbox).collect();
            let mut d: Vec<&Detection> = dets.iter().filter(|x| x.label == label).collect();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(MAX_DETECTIONS);
            ce.n_gt += g.len();
            for (t, flags) in evaluate_image(&g, &d, &thresholds).into_iter().enumerate() {
                ce.per_threshold[t].0.extend(d.iter().map(|x| x.score));
                ce.per_threshold[t].1.extend(flags);
            }
        }
        cats.push(ce);
    }
    if cats.is_empty() {
        log::warn!("detection_eval: no ground-truth boxes");
        return DetectionReport {
            ap: 0.0,
            ap50: 0.0,
            ar: 0.0,
        };
    }
    let mut ap = 0.0;
    let mut ar = 0.0;
    let mut ap50 = 0.0;
    for c in &cats {
        for (t, (scores, matched)) in c.per_threshold.iter().enumerate() {
            let (p, r) = average_precision(scores, matched, c.n_gt);
            ap += p;
            ar += r;
            if t == 0 {
                ap50 += p;
            }
        }
    }
    let n = cats.len() as f64;
    let nt = thresholds.len() as f64;
    DetectionReport {
        ap: ap / (n * nt),
        ap50: ap50 / n,
        ar: ar / (n * nt),
    }
}

/// Runs a detector over generated images and scores it.
pub fn detect_and_eval(
    samples: &[(Image, Vec<GroundTruth>)],
    detector: &dyn Detector,
) -> Result<DetectionReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for (img, gt) in samples {
        pairs.push((gt.clone(), detector.detect(img)?));
    }
    Ok(detection_eval(&pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gt(label: &str, bbox: BoundingBox) -> GroundTruth {
        GroundTruth {
            label: label.into(),
            bbox,
        }
    }

    fn det(label: &str, bbox: BoundingBox, score: f64) -> Detection {
        Detection {
            label: label.into(),
            bbox,
            score,
        }
    }

    #[test]
    fn oracle_detector_scores_one() {
        let g = vec![gt("dog", b(0.0, 0.0, 0.4, 0.4)), gt("cat", b(0.5, 0.5, 0.9, 0.9))];
        let d = g.iter().map(|x| det(&x.label, x.bbox, 1.0)).collect();
        let r = detection_eval(&[(g, d)]);
        assert_eq!((r.ap, r.ap50, r.ar), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_detector_scores_zero() {
        let r = detection_eval(&[(vec![gt("dog", b(0.0, 0.0, 0.4, 0.4))], vec![])]);
        assert_eq!((r.ap, r.ap50, r.ar), (0.0, 0.0, 0.0));
    }

    #[test]
    fn shifted_box_hits_only_low_thresholds() {
        // Shift a 0.4-wide box by w/4: IoU = 0.75*0.4 / (1.25*0.4) = 0.6.
        let g = vec![
            gt("a", b(0.0, 0.0, 0.4, 0.2)),
            gt("a", b(0.5, 0.5, 0.7, 0.7)),
            gt("a", b(0.0, 0.6, 0.2, 0.9)),
        ];
        let mut d: Vec<Detection> = g.iter().map(|x| det("a", x.bbox, 0.9)).collect();
        d[0].bbox = b(0.1, 0.0, 0.5, 0.2);
        assert!((d[0].bbox.iou(&g[0].bbox) - 0.6).abs() < 1e-12);
        let r = detection_eval(&[(g, d)]);
        assert_eq!(r.ap50, 1.0);
        assert!(r.ap < 1.0);
    }
}
