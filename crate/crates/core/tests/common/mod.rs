// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

//! Plain-loop reference implementations shared by the integration tests.

use explguide::eval::{Detection, GroundTruth};
use explguide::layout::BoundingBox;
use explguide::model::{Encoder, Image};
use explguide::relevance::{AttentionRecord, EncoderTrace};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_record(rng: &mut ChaCha8Rng, heads: usize, n: usize) -> AttentionRecord {
    let mut att = Array3::zeros((heads, n, n));
    for h in 0..heads {
        for i in 0..n {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0f64).exp()).collect();
            let z: f64 = raw.iter().sum();
            for j in 0..n {
                att[[h, i, j]] = raw[j] / z;
            }
        }
    }
    let grad = Array3::from_shape_fn((heads, n, n), |_| rng.random_range(-1.0..1.0));
    AttentionRecord::new(att, grad).unwrap()
}

/// Random trace with at most 6 tokens per modality, 3 layers and 4 heads.
pub fn random_trace(rng: &mut ChaCha8Rng) -> EncoderTrace {
    let n_text = rng.random_range(1..=6);
    let heads = rng.random_range(1..=4);
    let grids = [(1, 1), (1, 2), (2, 1), (1, 3), (1, 4), (2, 2), (1, 5), (5, 1)];
    let patch_grid = grids[rng.random_range(0..grids.len())];
    let n_image = patch_grid.0 * patch_grid.1 + 1;
    let text_layers = (0..rng.random_range(1..=3)).map(|_| random_record(rng, heads, n_text)).collect();
    let image_layers = (0..rng.random_range(1..=3)).map(|_| random_record(rng, heads, n_image)).collect();
    let eot_index = rng.random_range(0..n_text);
    let sot_index = (n_text > 1 && rng.random_bool(0.5)).then_some(0).filter(|&s| s != eot_index);
    let text_padding: Vec<usize> = (0..n_text)
        .filter(|&i| i != eot_index && Some(i) != sot_index && rng.random_bool(0.2))
        .collect();
    EncoderTrace {
        similarity: rng.random_range(-1.0..1.0),
        text_layers,
        image_layers,
        n_text_tokens: n_text,
        n_image_tokens: n_image,
        eot_index,
        sot_index,
        text_padding,
        cls_index: rng.random_range(0..n_image),
        patch_grid,
    }
}

/// `R <- R + mean_h[(grad * att)^+] R` over all layers, written as loops.
pub fn literal_accumulate(layers: &[AttentionRecord], n: usize, padding: &[usize]) -> Vec<Vec<f64>> {
    let mut r = vec![vec![0.0; n]; n];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for rec in layers {
        let heads = rec.attention.shape()[0];
        let mut a_bar = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for h in 0..heads {
                    let v = rec.gradient[[h, i, j]] * rec.attention[[h, i, j]];
                    if v > 0.0 {
                        s += v;
                    }
                }
                a_bar[i][j] = s / heads as f64;
            }
        }
        for &p in padding {
            for k in 0..n {
                a_bar[p][k] = 0.0;
                a_bar[k][p] = 0.0;
            }
        }
        let mut next = r.clone();
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a_bar[i][k] * r[k][j];
                }
                next[i][j] += s;
            }
        }
        r = next;
    }
    r
}

pub struct LiteralMaps {
    pub text: Vec<Vec<f64>>,
    pub image: Vec<Vec<f64>>,
    pub token_scores: Vec<f64>,
    pub heatmap: Vec<Vec<f64>>,
}

pub fn literal_relevance(t: &EncoderTrace) -> LiteralMaps {
    let text = literal_accumulate(&t.text_layers, t.n_text_tokens, &t.text_padding);
    let image = literal_accumulate(&t.image_layers, t.n_image_tokens, &[]);
    let mut token_scores = text[t.eot_index].clone();
    token_scores[t.eot_index] = 0.0;
    if let Some(s) = t.sot_index {
        token_scores[s] = 0.0;
    }
    for &p in &t.text_padding {
        token_scores[p] = 0.0;
    }
    let (rows, cols) = t.patch_grid;
    let patches: Vec<f64> = (0..t.n_image_tokens).filter(|&j| j != t.cls_index).map(|j| image[t.cls_index][j]).collect();
    let heatmap = (0..rows).map(|r| patches[r * cols..(r + 1) * cols].to_vec()).collect();
    LiteralMaps {
        text,
        image,
        token_scores,
        heatmap,
    }
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Array2<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b[[i, j]]).abs());
        }
    }
    m
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Layout objective one object at a time: trace, relevance, semi-binary
/// mask, Dice against the box, then `-sum lambda_j dice_j - sum sim_j`.
pub fn layout_loss_by_steps(
    image: &Image,
    boxes: &[(BoundingBox, String, f64)],
    encoder: &dyn Encoder,
    threshold: f64,
    temperature: f64,
) -> f64 {
    let info = encoder.info();
    let (rows, cols) = info.patch_grid;
    let mut loss = 0.0;
    for (bbox, text, lambda) in boxes {
        let tokens = encoder.tokenize(text).unwrap();
        let (sim, trace) = encoder.encode_and_trace(&tokens, image).unwrap();
        let heat = literal_relevance(&trace).heatmap;
        let mut max: f64 = 0.0;
        for row in &heat {
            for &v in row {
                max = max.max(v);
            }
        }
        let gt = bbox.rasterize((rows, cols));
        let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
        for r in 0..rows {
            for c in 0..cols {
                let p = sigmoid((heat[r][c] / max - threshold) * temperature);
                inter += p * gt[[r, c]];
                sum_p += p;
                sum_g += gt[[r, c]];
            }
        }
        let dice = 2.0 * inter / (sum_p + sum_g);
        loss -= lambda * dice;
        loss -= sim;
    }
    loss
}

/// Otsu by trying every one of the 255 splits from scratch.
pub fn brute_force_otsu(values: &[f64]) -> Option<usize> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let bins: Vec<usize> = values.iter().map(|v| ((v / max * 256.0).floor() as usize).min(255)).collect();
    let mut best: Option<(usize, f64)> = None;
    for k in 0..255 {
        let (bg, fg): (Vec<f64>, Vec<f64>) = {
            let bg: Vec<f64> = bins.iter().filter(|&&b| b <= k).map(|&b| b as f64).collect();
            let fg: Vec<f64> = bins.iter().filter(|&&b| b > k).map(|&b| b as f64).collect();
            (bg, fg)
        };
        if bg.is_empty() || fg.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let (w0, w1) = (bg.len() as f64 / n, fg.len() as f64 / n);
        let mu0 = bg.iter().sum::<f64>() / bg.len() as f64;
        let mu1 = fg.iter().sum::<f64>() / fg.len() as f64;
        let v = w0 * w1 * (mu0 - mu1).powi(2);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// COCO bbox AP / AP50 / AR (all areas, 100 detections) per the reference
/// evaluation: greedy matching in score order, 101-point interpolated
/// precision, averaged over categories with ground truth.
pub fn coco_reference(images: &[(Vec<GroundTruth>, Vec<Detection>)]) -> (f64, f64, f64) {
    let thresholds: Vec<f64> = (0..10).map(|i| if i == 9 { 0.95 } else { 0.5 + i as f64 * 0.05 }).collect();
    let rec_thrs: Vec<f64> = (0..101).map(|i| if i == 100 { 1.0 } else { i as f64 * 0.01 }).collect();
    let mut labels: Vec<String> = images.iter().flat_map(|(g, _)| g.iter().map(|x| x.label.clone())).collect();
    labels.sort();
    labels.dedup();
    let (mut ap, mut ap50, mut ar) = (0.0, 0.0, 0.0);
    for label in &labels {
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut scored: Vec<(f64, bool)> = Vec::new();
            let mut n_gt = 0;
            for (gts, dets) in images {
                let g: Vec<&BoundingBox> = gts.iter().filter(|x| &x.label == label).map(|x| &x.bbox).collect();
                n_gt += g.len();
                let mut d: Vec<&Detection> = dets.iter().filter(|x| &x.label == label).collect();
                d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                d.truncate(100);
                let mut taken = vec![false; g.len()];
                for det in d {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, gb) in g.iter().enumerate() {
                        let iou = det.bbox.iou(gb);
                        if taken[gi] || iou < t.min(1.0 - 1e-10) {
                            continue;
                        }
                        if best.is_none_or(|(_, b)| iou >= b) {
                            best = Some((gi, iou));
                        }
                    }
                    if let Some((gi, _)) = best {
                        taken[gi] = true;
                    }
                    scored.push((det.score, best.is_some()));
                }
            }
            let mut idx: Vec<usize> = (0..scored.len()).collect();
            idx.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap());
            let mut prec = Vec::new();
            let mut rec = Vec::new();
            let (mut tp, mut fp) = (0usize, 0usize);
            for i in idx {
                if scored[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                prec.push(tp as f64 / (tp + fp) as f64);
                rec.push(tp as f64 / n_gt as f64);
            }
            let mut sum = 0.0;
            for &r in &rec_thrs {
                let best = (0..prec.len()).filter(|&i| rec[i] >= r).map(|i| prec[i]).fold(None, |m: Option<f64>, p| {
                    Some(m.map_or(p, |m| m.max(p)))
                });
                sum += best.unwrap_or(0.0);
            }
            let p = sum / 101.0;
            ap += p;
            if ti == 0 {
                ap50 += p;
            }
            ar += rec.last().copied().unwrap_or(0.0);
        }
    }
    let nc = labels.len() as f64;
    (ap / (nc * 10.0), ap50 / nc, ar / (nc * 10.0))
}

pub fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Image {
    Image(Array3::from_shape_fn(shape, |_| rng.random_range(0.0..1.0)))
}
