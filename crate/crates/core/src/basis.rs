// SPDX-License-Identifier: MIT OR Apache-2.0

//! Augmentation-averaged similarity, relevance-aware basis selection and
//! weighted-combination latent search.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::eval::pos::{caption_scores, is_noun, PosTagger};
use crate::model::{forward_pair, DiffEncoder, Encoder, Generator, Image, Tokenized};
use crate::optim::{check_finite, Adam, AdamConfig};
use crate::presets;
use crate::relevance::{compute_relevance, word_scores};

const CROP_RETRIES: usize = 16;

/// Random resized crop, horizontal flip and per-channel gain/offset jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub n_aug: usize,
    /// Range of the crop's area fraction.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy {
            n_aug: 8,
            crop_scale: (0.7, 1.0),
            flip_prob: 0.5,
            jitter: 0.05,
            seed: 0,
        }
    }
}

impl AugPolicy {
    pub fn identity() -> Self {
        AugPolicy {
            n_aug: 1,
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if self.n_aug == 0 {
            return Err(Error::invalid("n_aug must be at least 1"));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("crop_scale must satisfy 0 < lo <= hi <= 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.jitter >= 0.0) {
            return Err(Error::invalid("flip_prob must be in [0, 1] and jitter nonnegative"));
        }
        Ok(())
    }

    /// The policy's views for images of `shape`, in draw order.
    pub fn views(&self, shape: (usize, usize, usize)) -> Result<Vec<View>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_aug).map(|_| View::sample(self, shape, &mut rng)).collect()
    }
}

/// One augmentation: crop window in pixels, flip and per-channel affine.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
    pub flip: bool,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    shape: (usize, usize, usize),
}

impl View {
    pub fn identity(shape: (usize, usize, usize)) -> Self {
        View {
            top: 0.0,
            left: 0.0,
            height: shape.1 as f64,
            width: shape.2 as f64,
            flip: false,
            gain: vec![1.0; shape.0],
            bias: vec![0.0; shape.0],
            shape,
        }
    }

    fn sample(policy: &AugPolicy, shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Result<Self> {
        let (c, h, w) = shape;
        let (lo, hi) = policy.crop_scale;
        for _ in 0..CROP_RETRIES {
            let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let side = scale.sqrt();
            let (ch, cw) = (side * h as f64, side * w as f64);
            if ch < 1.0 || cw < 1.0 {
                continue;
            }
            let top = rng.random::<f64>() * (h as f64 - ch);
            let left = rng.random::<f64>() * (w as f64 - cw);
            let flip = policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob;
            let mut jitter = |_| if policy.jitter > 0.0 { rng.random_range(-policy.jitter..=policy.jitter) } else { 0.0 };
            let gain = (0..c).map(|i| 1.0 + jitter(i)).collect();
            let bias = (0..c).map(|i| jitter(i)).collect();
            return Ok(View {
                top,
                left,
                height: ch,
                width: cw,
                flip,
                gain,
                bias,
                shape,
            });
        }
        Err(Error::InvalidArgument(format!("no non-empty crop after {CROP_RETRIES} draws")))
    }

    pub fn is_identity(&self) -> bool {
        *self == View::identity(self.shape)
    }

    /// `hw x hw` bilinear resampling matrix; `out = img . M`.
    fn resample(&self) -> Array2<f64> {
        let (_, h, w) = self.shape;
        let mut m = Array2::zeros((h * w, h * w));
        let axis = |dst: usize, start: f64, len: f64, n: usize| -> [(usize, f64); 2] {
            let src = (start + (dst as f64 + 0.5) * len / n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let f = src - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        };
        for y in 0..h {
            for x in 0..w {
                let sx = if self.flip { w - 1 - x } else { x };
                for (yi, wy) in axis(y, self.top, self.height, h) {
                    for (xi, wx) in axis(sx, self.left, self.width, w) {
                        m[[yi * w + xi, y * w + x]] += wy * wx;
                    }
                }
            }
        }
        m
    }

    /// The view of a `channels x (h*w)` image on the tape.
    pub fn apply_var(&self, image: &Var) -> Var {
        if self.is_identity() {
            return image.clone();
        }
        let g = image.graph();
        let resampled = image.matmul(&g.leaf(self.resample()));
        let c = self.shape.0;
        let gain = g.leaf(Array2::from_shape_vec((c, 1), self.gain.clone()).expect("c gains"));
        let bias = g.leaf(Array2::from_shape_vec((c, 1), self.bias.clone()).expect("c biases"));
        &(&resampled * &gain) + &bias
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let g = Graph::new();
        Image::from_var(&self.apply_var(&image.to_var(&g)), self.shape)
    }
}

/// Mean similarity of `tokens` over the policy's views of `image`.
pub fn augclip(encoder: &dyn Encoder, tokens: &Tokenized, image: &Image, policy: &AugPolicy) -> Result<f64> {
    let views = policy.views(image.shape())?;
    let mut total = 0.0;
    for v in &views {
        total += encoder.similarity(tokens, &v.apply(image)?)?;
    }
    Ok(total / views.len() as f64)
}

/// [`augclip`] on the tape for fixed views.
pub fn augclip_var(encoder: &dyn DiffEncoder, tokens: &Tokenized, image: &Var, views: &[View]) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::invalid("no augmentation views"));
    }
    let g = image.graph();
    let mut total = g.scalar(0.0);
    for v in views {
        total = &total + &forward_pair(encoder, g, tokens, &v.apply_var(image))?.similarity;
    }
    Ok(total.scale(1.0 / views.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub augclip: f64,
    /// Mean relevance of the semantic words; zero when not computed.
    pub relevance: f64,
    pub score: f64,
}

/// Ranks by `augclip + lambda * relevance`, best first; ties keep index order.
pub fn rank_candidates(scores: &[(f64, f64)], lambda: f64) -> Vec<CandidateScore> {
    let mut out: Vec<CandidateScore> = scores
        .iter()
        .enumerate()
        .map(|(index, &(augclip, relevance))| CandidateScore {
            index,
            augclip,
            relevance,
            score: if lambda == 0.0 { augclip } else { augclip + lambda * relevance },
        })
        .collect();
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub latents: Vec<Vec<f64>>,
    /// Every candidate, best first.
    pub scoreboard: Vec<CandidateScore>,
    pub selected: Vec<usize>,
}

/// Top `k` of `candidates` by augmentation score plus `lambda` times the
/// mean relevance of `words`.
#[allow(clippy::too_many_arguments)]
pub fn select_basis(
    candidates: &[Vec<f64>],
    prompt: &str,
    words: &[String],
    k: usize,
    lambda: f64,
    policy: &AugPolicy,
    encoder: &dyn Encoder,
    generator: &dyn Generator,
) -> Result<Basis> {
    if k == 0 || candidates.len() < k {
        return Err(Error::invalid(format!("need 1 <= k <= {} candidates, got k = {k}", candidates.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    policy.validate()?;
    let tokens = encoder.tokenize(prompt)?;
    let spans = tokens.spans_for(words)?;
    let raw: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|z| {
            let image = generator.generate(z)?;
            let a = augclip(encoder, &tokens, &image, policy)?;
            if lambda == 0.0 || spans.is_empty() {
                return Ok((a, 0.0));
            }
            let (_, trace) = encoder.encode_and_trace(&tokens, &image)?;
            let s = word_scores(&compute_relevance(&trace)?.token_scores, &spans)?;
            Ok((a, s.iter().sum::<f64>() / s.len() as f64))
        })
        .collect::<Result<_>>()?;
    let scoreboard = rank_candidates(&raw, lambda);
    let selected: Vec<usize> = scoreboard.iter().take(k).map(|c| c.index).collect();
    Ok(Basis {
        latents: selected.iter().map(|&i| candidates[i].clone()).collect(),
        scoreboard,
        selected,
    })
}

/// Nouns whose normalized relevance is under `threshold`.
pub fn semantic_from_scores(words: &[String], tags: &[String], normalized: &[f64], threshold: f64) -> Vec<String> {
    words
        .iter()
        .zip(tags)
        .zip(normalized)
        .filter(|((_, t), &s)| is_noun(t) && s < threshold)
        .map(|((w, _), _)| w.clone())
        .collect()
}

/// Neglected nouns of `prompt` in a first-pass image.
pub fn choose_semantic_set(
    prompt: &str,
    image: &Image,
    encoder: &dyn Encoder,
    tagger: &dyn PosTagger,
) -> Vec<String> {
    match caption_scores(prompt, image, encoder, tagger) {
        Ok((tags, scores)) => {
            let words: Vec<String> = match encoder.tokenize(prompt) {
                Ok(t) => t.spans.into_iter().map(|s| s.word).collect(),
                Err(e) => {
                    log::warn!("choose_semantic_set: {e}; using an empty set");
                    return Vec::new();
                }
            };
            semantic_from_scores(&words, &tags, &scores, presets::SEMANTIC_THRESHOLD)
        }
        Err(e) => {
            log::warn!("choose_semantic_set: {e}; using an empty set");
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            steps: 30,
            adam: AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuseResult {
    pub latent: Vec<f64>,
    pub image: Image,
    pub weights: Vec<f64>,
    /// Augmentation score before each step, then after the last one.
    pub history: Vec<f64>,
}

/// Ascends the augmentation score of `g(sum_j w_j e_j)` from `e_j = v_j`,
/// `w_j = 1/k`.
pub fn fuse_optimize(
    basis: &[Vec<f64>],
    prompt: &str,
    policy: &AugPolicy,
    encoder: &dyn DiffEncoder,
    generator: &dyn Generator,
    cfg: &FuseConfig,
) -> Result<FuseResult> {
    let k = basis.len();
    if k == 0 {
        return Err(Error::invalid("empty basis"));
    }
    let d = generator.latent_dim();
    if basis.iter().any(|v| v.len() != d) {
        return Err(Error::invalid(format!("basis latents must have {d} entries")));
    }
    let tokens = encoder.tokenize(prompt)?;
    let views = policy.views(generator.image_shape())?;
    let mut params: Vec<f64> = vec![1.0 / k as f64; k];
    params.extend(basis.iter().flatten());
    let mut opt = Adam::new(cfg.adam, params.len());
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut last_good = params.clone();
    for step in 0..=cfg.steps {
        let graph = Graph::new();
        let w = graph.leaf(Array2::from_shape_vec((1, k), params[..k].to_vec()).expect("k weights"));
        let e = graph.leaf(Array2::from_shape_vec((k, d), params[k..].to_vec()).expect("k x d basis"));
        let z = w.matmul(&e);
        let img = generator.generate_var(&graph, &z)?;
        let score = augclip_var(encoder, &tokens, &img, &views)?;
        if let Err(e) = check_finite(score.item(), step, &last_good) {
            return Err(e);
        }
        last_good.clone_from(&params);
        history.push(score.item());
        if step == cfg.steps {
            break;
        }
        let loss = score.scale(-1.0);
        let grads = graph.grad(&loss, &[w, e], false)?;
        let flat: Vec<f64> = grads.iter().flat_map(|g| g.value().iter().copied().collect::<Vec<_>>()).collect();
        opt.step(&mut params, &flat);
    }
    let weights = params[..k].to_vec();
    let latent = combine(&weights, &params[k..], d);
    let image = generator.generate(&latent)?;
    Ok(FuseResult {
        latent,
        image,
        weights,
        history,
    })
}

fn combine(weights: &[f64], basis: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| weights.iter().enumerate().map(|(j, w)| w * basis[j * d + i]).sum())
        .collect()
}
