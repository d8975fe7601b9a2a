// SPDX-License-Identifier: MIT OR Apache-2.0

//! Datasets, the training loop and evaluation.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    class_forward, class_name_score_var, constant_image, image_features, image_loss, sample_negatives, LabelPosition,
    LabelSet, PromptMode, PromptSet, PromptTemplate,
};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{DiffEncoder, Image};
use crate::optim::{check_finite, Sgd, SgdConfig};
use crate::presets;
use crate::relevance::diff::GradientMode;

/// Index file inside a dataset root: `<directory> <display name>` per line.
pub const CLASSNAMES_FILE: &str = "classnames.txt";

const NEGATIVE_STREAM: u64 = 0x6e65_6761_7469_7665;
const INIT_STREAM: u64 = 0x696e_6974;
const SHOTS_STREAM: u64 = 0x7368_6f74;

/// Labeled images in class order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<(Image, usize)>,
}

/// Random per-class base pattern plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<String>,
    pub per_class: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.05
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<(Image, usize)>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("dataset has no classes"));
        }
        if let Some((_, c)) = samples.iter().find(|(_, c)| *c >= classes.len()) {
            return Err(Error::invalid(format!("label {c} outside {} classes", classes.len())));
        }
        Ok(Dataset { classes, samples })
    }

    /// Reads `root/<dir>/*.png` for every line of the index file.
    pub fn from_folders(root: &Path, shape: (usize, usize, usize)) -> Result<Self> {
        let index = root.join(CLASSNAMES_FILE);
        let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        let mut classes = Vec::new();
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (dir, name) = line.split_once(char::is_whitespace).ok_or_else(|| {
                Error::Format(format!(
                    "{}: line {}: expected `<directory> <class name>`",
                    index.display(),
                    lineno + 1
                ))
            })?;
            let label = classes.len();
            classes.push(name.trim().to_string());
            let folder = root.join(dir);
            let mut files: Vec<_> = fs::read_dir(&folder)
                .map_err(|e| Error::io(&folder, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for f in files {
                samples.push((Image::load(&f, shape)?, label));
            }
        }
        Dataset::new(classes, samples)
    }

    pub fn synthetic(spec: &SyntheticSpec, shape: (usize, usize, usize)) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let mut samples = Vec::new();
        let bases: Vec<Image> = spec
            .classes
            .iter()
            .map(|_| {
                let mut img = Image::zeros(shape);
                img.0.mapv_inplace(|_| rand::Rng::random::<f64>(&mut rng));
                img
            })
            .collect();
        for (c, base) in bases.iter().enumerate() {
            for _ in 0..spec.per_class {
                let mut img = base.clone();
                img.0.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                samples.push((img, c));
            }
        }
        Dataset::new(spec.classes.clone(), samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for (_, c) in &self.samples {
            counts[*c] += 1;
        }
        counts
    }

    /// `shots` seeded picks per class, grouped by class.
    pub fn few_shot(&self, shots: usize, seed: u64) -> Result<Dataset> {
        if shots == 0 {
            return Err(Error::invalid("shots must be at least 1"));
        }
        let counts = self.class_counts();
        if let Some(c) = counts.iter().position(|&n| n < shots) {
            return Err(Error::invalid(format!(
                "class `{}` has {} images, {shots} shots requested",
                self.classes[c], counts[c]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHOTS_STREAM);
        let mut samples = Vec::with_capacity(shots * self.classes.len());
        for c in 0..self.classes.len() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].1 == c).collect();
            idx.shuffle(&mut rng);
            idx.truncate(shots);
            idx.sort_unstable();
            samples.extend(idx.into_iter().map(|i| self.samples[i].clone()));
        }
        Dataset::new(self.classes.clone(), samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerConfig {
    /// Context length `M`.
    pub context_tokens: usize,
    pub label_position: LabelPosition,
    pub mode: PromptMode,
    /// Explainability weight; when absent it follows `backbone`.
    pub lambda: Option<f64>,
    pub backbone: Option<String>,
    pub shots: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Schedule steps are epochs.
    pub sgd: SgdConfig,
    pub negatives: usize,
    pub logit_scale: f64,
    pub init_std: f64,
    pub gradient_mode: GradientMode,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            context_tokens: presets::PROMPT_CONTEXT_TOKENS,
            label_position: LabelPosition::End,
            mode: PromptMode::Unified,
            lambda: None,
            backbone: None,
            shots: 1,
            epochs: 200,
            batch_size: 32,
            sgd: SgdConfig::default(),
            negatives: presets::MAX_NEGATIVE_CLASSES,
            logit_scale: 1.0,
            init_std: 0.02,
            gradient_mode: GradientMode::Detached,
            seed: 0,
        }
    }
}

impl TunerConfig {
    pub fn resolved_lambda(&self) -> f64 {
        self.lambda
            .unwrap_or_else(|| self.backbone.as_deref().map_or(presets::PROMPT_LAMBDA_OTHER, presets::prompt_lambda))
    }

    pub fn validate(&self) -> Result<()> {
        let lambda = self.resolved_lambda();
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite and nonnegative"));
        }
        if self.shots == 0 || self.batch_size == 0 || self.context_tokens == 0 {
            return Err(Error::invalid("shots, batch_size and context_tokens must be positive"));
        }
        if self.label_position == LabelPosition::Middle && self.context_tokens % 2 != 0 {
            return Err(Error::invalid("middle label position needs an even context length"));
        }
        Ok(())
    }
}

/// Seeded `N(0, init_std)` contexts, one or one per class.
pub fn init_prompts(cfg: &TunerConfig, n_classes: usize, width: usize) -> Result<PromptSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::invalid(e.to_string()))?;
    let count = match cfg.mode {
        PromptMode::Unified => 1,
        PromptMode::Csc => n_classes,
    };
    let templates = (0..count)
        .map(|_| {
            let ctx = Array2::from_shape_fn((cfg.context_tokens, width), |_| normal.sample(&mut rng));
            PromptTemplate::new(ctx, cfg.label_position)
        })
        .collect::<Result<_>>()?;
    Ok(PromptSet {
        mode: cfg.mode,
        templates,
    })
}

/// Sample indices of every optimizer step, epoch by epoch.
pub fn batch_schedule(seed: u64, n: usize, batch_size: usize, epochs: usize) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub mean_gt_score: Option<f64>,
    pub skipped_terms: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub classes: Vec<String>,
    pub prompts: PromptSet,
    pub log: Vec<StepLog>,
}

fn flatten(prompts: &PromptSet) -> Vec<f64> {
    prompts.templates.iter().flat_map(|t| t.context.iter().flatten().copied()).collect()
}

fn unflatten(prompts: &mut PromptSet, flat: &[f64]) {
    let mut it = flat.iter();
    for t in &mut prompts.templates {
        for row in &mut t.context {
            for v in row.iter_mut() {
                *v = *it.next().expect("parameter count");
            }
        }
    }
}

/// Tunes context vectors on `cfg.shots` images per class.
pub fn train(encoder: &dyn DiffEncoder, dataset: &Dataset, cfg: &TunerConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let lambda = cfg.resolved_lambda();
    let labels = LabelSet::new(&dataset.classes, encoder)?;
    let data = dataset.few_shot(cfg.shots, cfg.seed)?;
    let width = encoder.token_embeddings(&[])?.ncols();
    let mut prompts = init_prompts(cfg, labels.len(), width)?;
    let features: Vec<Array2<f64>> = data
        .samples
        .par_iter()
        .map(|(img, _)| image_features(encoder, img))
        .collect::<Result<_>>()?;
    let schedule = batch_schedule(cfg.seed, data.len(), cfg.batch_size, cfg.epochs);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NEGATIVE_STREAM);
    let mut params = flatten(&prompts);
    let mut sgd = Sgd::new(cfg.sgd, params.len());
    let mut log = Vec::new();
    let mut step = 0;
    for (epoch, batches) in schedule.iter().enumerate() {
        let lr = cfg.sgd.lr_at(epoch, cfg.epochs);
        for batch in batches {
            let graph = Graph::new();
            let contexts: Vec<_> = prompts.templates.iter().map(|t| graph.leaf(t.context_array())).collect();
            let mut total = graph.scalar(0.0);
            let mut ce = 0.0;
            let mut gt_scores = Vec::new();
            let mut skipped = 0;
            for &i in batch {
                let gt = data.samples[i].1;
                let negatives = if lambda != 0.0 {
                    sample_negatives(&mut neg_rng, labels.len(), gt, cfg.negatives)
                } else {
                    Vec::new()
                };
                let image = constant_image(&graph, &features[i]);
                let l = image_loss(
                    encoder,
                    &graph,
                    &contexts,
                    &prompts,
                    &labels,
                    &image,
                    gt,
                    &negatives,
                    lambda,
                    cfg.logit_scale,
                    cfg.gradient_mode,
                )?;
                total = &total + &l.total;
                ce += l.cross_entropy;
                gt_scores.extend(l.gt_score);
                skipped += l.skipped_terms;
            }
            let n = batch.len() as f64;
            let loss = total.scale(1.0 / n);
            let value = loss.item();
            check_finite(value, step, &params)?;
            let grads = graph.grad(&loss, &contexts, false)?;
            let flat_grad: Vec<f64> = grads.iter().flat_map(|g| g.value().iter().copied().collect::<Vec<_>>()).collect();
            sgd.step(&mut params, &flat_grad, lr);
            unflatten(&mut prompts, &params);
            log.push(StepLog {
                step,
                epoch,
                lr,
                loss: value,
                cross_entropy: ce / n,
                mean_gt_score: (!gt_scores.is_empty()).then(|| gt_scores.iter().sum::<f64>() / gt_scores.len() as f64),
                skipped_terms: skipped,
            });
            step += 1;
        }
    }
    Ok(TrainResult {
        classes: labels.names(),
        prompts,
        log,
    })
}

/// Per-class similarities of one image under `prompts`.
pub fn class_similarities(
    encoder: &dyn DiffEncoder,
    prompts: &PromptSet,
    labels: &LabelSet,
    image: &Image,
) -> Result<Vec<f64>> {
    let features = image_features(encoder, image)?;
    let graph = Graph::new();
    let img = constant_image(&graph, &features);
    let contexts: Vec<_> = prompts.templates.iter().map(|t| graph.leaf(t.context_array())).collect();
    labels
        .classes
        .iter()
        .enumerate()
        .map(|(c, class)| {
            let ctx = match prompts.mode {
                PromptMode::Unified => &contexts[0],
                PromptMode::Csc => &contexts[c],
            };
            Ok(class_forward(encoder, &graph, ctx, prompts.for_class(c), class, &img, None)?.similarity.item())
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy; ties go to the earlier class.
pub fn evaluate(encoder: &dyn DiffEncoder, prompts: &PromptSet, classes: &[String], testset: &Dataset) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let labels = LabelSet::new(classes, encoder)?;
    let hits: Vec<bool> = testset
        .samples
        .par_iter()
        .map(|(img, gt)| Ok(argmax(&class_similarities(encoder, prompts, &labels, img)?) == *gt))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Mean class-name score of the true class; degenerate images are skipped.
pub fn mean_class_score(
    encoder: &dyn DiffEncoder,
    prompts: &PromptSet,
    classes: &[String],
    dataset: &Dataset,
) -> Result<f64> {
    let labels = LabelSet::new(classes, encoder)?;
    let scores: Vec<Option<f64>> = dataset
        .samples
        .par_iter()
        .map(|(img, gt)| {
            let features = image_features(encoder, img)?;
            let graph = Graph::new();
            let image = constant_image(&graph, &features);
            let ctx = graph.leaf(prompts.for_class(*gt).context_array());
            let f = class_forward(
                encoder,
                &graph,
                &ctx,
                prompts.for_class(*gt),
                &labels.classes[*gt],
                &image,
                Some(GradientMode::Detached),
            )?;
            let ts = f.token_scores.expect("relevance requested");
            match class_name_score_var(&ts, &f.layout) {
                Ok(s) => Ok(Some(s.item())),
                Err(Error::DegenerateRelevance { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = scores.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::DegenerateRelevance { denominator: 0.0 });
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}
