// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layout-conditioned generation: each object's relevance heatmap is turned
//! into a soft mask and pulled onto its box with a Dice overlap term, next
//! to the usual per-object similarity.

pub mod boxes;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{forward_pair, DiffEncoder, Generator, Image, Tokenized};
use crate::optim::{check_finite, Adam, AdamConfig};
use crate::presets;
use crate::relevance::diff::{accumulate, attention_gradients, frozen_gradients, patch_heatmap, GradientMode};
use crate::relevance::compute_relevance;

pub use boxes::{
    blackout_mask, coco_layout_filter, layout_filter_indices, parse_coco_layouts, read_coco_layouts, union_mask,
    BoundingBox, CocoLayout, LayoutEntry,
};

/// Below this heatmap maximum the mask is the constant `sigmoid(-T*temp)`.
pub const MASK_MAX_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    pub threshold: f64,
    pub temperature: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            threshold: presets::MASK_THRESHOLD,
            temperature: presets::MASK_TEMPERATURE,
        }
    }
}

/// `0.15 / sqrt(area ratio)`.
pub fn lambda_for_box(b: &BoundingBox) -> f64 {
    presets::box_lambda(b.area_ratio())
}

/// Semi-binary mask `sigmoid((R / max R - T) * temp)`.
pub fn expl_mask(heatmap: &Array2<f64>, p: MaskParams) -> Result<Array2<f64>> {
    if heatmap.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("expl_mask: heatmap must be nonnegative"));
    }
    if !(p.temperature > 0.0) {
        return Err(Error::invalid("expl_mask: temperature must be positive"));
    }
    let max = heatmap.iter().cloned().fold(0.0f64, f64::max);
    if max < MASK_MAX_EPS {
        return Ok(Array2::from_elem(heatmap.dim(), crate::autodiff::sigmoid(-p.threshold * p.temperature)));
    }
    Ok(heatmap.mapv(|v| crate::autodiff::sigmoid((v / max - p.threshold) * p.temperature)))
}

/// [`expl_mask`] on the tape.
pub fn expl_mask_var(heatmap: &Var, p: MaskParams) -> Var {
    let max = heatmap.max_all();
    if max.item() < MASK_MAX_EPS {
        let c = crate::autodiff::sigmoid(-p.threshold * p.temperature);
        return heatmap.graph().leaf(Array2::from_elem(heatmap.shape(), c));
    }
    (heatmap / &max).offset(-p.threshold).scale(p.temperature).sigmoid()
}

/// Soft Dice `2 sum(p*g) / (sum p + sum g)`; 0 when both are all zero.
pub fn dice_term(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::invalid("dice_term: masks differ in shape"));
    }
    let den = pred.sum() + gt.sum();
    if den == 0.0 {
        log::warn!("dice_term: both masks are empty; defining overlap as 0");
        return Ok(0.0);
    }
    Ok(2.0 * (pred * gt).sum() / den)
}

pub fn dice_var(pred: &Var, gt: &Array2<f64>) -> Var {
    let g = pred.graph().leaf(gt.clone());
    let den = &pred.sum() + &g.sum();
    if den.item() == 0.0 {
        return pred.graph().scalar(0.0);
    }
    &(pred * &g).sum().scale(2.0) / &den
}

/// One object of a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
    pub lambda: f64,
}

impl LayoutObject {
    pub fn new(bbox: BoundingBox, text: &str) -> Self {
        LayoutObject {
            bbox,
            text: text.to_string(),
            lambda: lambda_for_box(&bbox),
        }
    }

    pub fn from_entry(e: &LayoutEntry) -> Result<Self> {
        let lambda = e.lambda.unwrap_or_else(|| lambda_for_box(&e.bbox));
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!("object `{}` has a negative weight", e.text)));
        }
        Ok(LayoutObject {
            bbox: e.bbox,
            text: e.text.clone(),
            lambda,
        })
    }
}

/// Which objective [`generate`] descends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutObjective {
    /// Dice on relevance masks plus per-object similarity.
    #[default]
    Explainability,
    /// Similarity of every text with every box-masked image.
    Masked,
    /// [`LayoutObjective::Masked`] plus full-image similarity of every text.
    MaskedPlusFull,
}

/// How the attention-gradient factor of the heatmap is obtained.
#[derive(Debug, Clone)]
pub enum GradientSource {
    Mode(GradientMode),
    /// `[object][layer][head]` constants, e.g. from [`image_attention_gradients`].
    Frozen(Vec<Vec<Vec<Tensor>>>),
}

impl Default for GradientSource {
    fn default() -> Self {
        GradientSource::Mode(GradientMode::Detached)
    }
}

/// Loss value and its per-object parts.
#[derive(Debug, Clone)]
pub struct LayoutLoss {
    pub total: Var,
    pub dice: Vec<Option<f64>>,
    pub similarity: Vec<f64>,
}

fn check_objects(objects: &[LayoutObject]) -> Result<()> {
    if objects.is_empty() {
        return Err(Error::invalid("layout has no objects"));
    }
    if let Some(o) = objects.iter().find(|o| !(o.lambda >= 0.0)) {
        return Err(Error::invalid(format!("object `{}` has a negative weight", o.text)));
    }
    Ok(())
}

fn tokenize_all(encoder: &dyn DiffEncoder, objects: &[LayoutObject]) -> Result<Vec<Tokenized>> {
    objects.iter().map(|o| encoder.tokenize(&o.text)).collect()
}

/// `-sum_j lambda_j dice_j - sum_j sim_j` on the tape; `image` is
/// `channels x (h*w)`. Objects with zero weight skip relevance entirely.
pub fn layout_loss(
    image: &Var,
    objects: &[LayoutObject],
    encoder: &dyn DiffEncoder,
    mask: MaskParams,
    source: &GradientSource,
) -> Result<LayoutLoss> {
    check_objects(objects)?;
    let tokens = tokenize_all(encoder, objects)?;
    let info = encoder.info();
    let graph = image.graph().clone();
    let mut total = graph.scalar(0.0);
    let mut dice = Vec::with_capacity(objects.len());
    let mut similarity = Vec::with_capacity(objects.len());
    for (j, (obj, tok)) in objects.iter().zip(&tokens).enumerate() {
        let fwd = forward_pair(encoder, &graph, tok, image)?;
        similarity.push(fwd.similarity.item());
        if obj.lambda == 0.0 {
            dice.push(None);
            total = &total - &fwd.similarity;
            continue;
        }
        let grads = match source {
            GradientSource::Mode(m) => attention_gradients(&fwd.similarity, &fwd.image.attention, *m)?,
            GradientSource::Frozen(all) => {
                let g = all
                    .get(j)
                    .ok_or_else(|| Error::invalid("frozen gradients missing for an object"))?;
                frozen_gradients(&graph, g)
            }
        };
        let r = accumulate(&fwd.image.attention, &grads, &[])?;
        let heat = patch_heatmap(&r, info.cls_index, info.patch_grid);
        let pred = expl_mask_var(&heat, mask);
        let d = dice_var(&pred, &obj.bbox.rasterize(info.patch_grid));
        dice.push(Some(d.item()));
        total = &(&total - &d.scale(obj.lambda)) - &fwd.similarity;
    }
    Ok(LayoutLoss {
        total,
        dice,
        similarity,
    })
}

/// `d sim_j / d A` of the image tower for every object, as plain arrays.
pub fn image_attention_gradients(
    image: &Image,
    objects: &[LayoutObject],
    encoder: &dyn DiffEncoder,
) -> Result<Vec<Vec<Vec<Tensor>>>> {
    let tokens = tokenize_all(encoder, objects)?;
    tokens
        .iter()
        .map(|tok| {
            let graph = Graph::new();
            let fwd = forward_pair(encoder, &graph, tok, &image.to_var(&graph))?;
            let g = attention_gradients(&fwd.similarity, &fwd.image.attention, GradientMode::Detached)?;
            Ok(g.iter().map(|l| l.iter().map(|v| v.value().as_ref().clone()).collect()).collect())
        })
        .collect()
}

/// Similarity-only baselines: `-sum_t sum_m sim(blackout(i, m), t)`, plus
/// `-sum_t sim(i, t)` for [`LayoutObjective::MaskedPlusFull`].
pub fn baseline_losses(
    image: &Var,
    objects: &[LayoutObject],
    encoder: &dyn DiffEncoder,
    variant: LayoutObjective,
) -> Result<(Var, usize)> {
    check_objects(objects)?;
    if variant == LayoutObjective::Explainability {
        return Err(Error::invalid("baseline_losses needs a masked variant"));
    }
    let tokens = tokenize_all(encoder, objects)?;
    let (_, h, w) = encoder.info().image_shape;
    let graph = image.graph().clone();
    let masked: Vec<Var> = objects
        .iter()
        .map(|o| image * &graph.leaf(blackout_mask(&o.bbox, h, w)))
        .collect();
    let mut total = graph.scalar(0.0);
    let mut terms = 0;
    for tok in &tokens {
        for m in &masked {
            total = &total - &forward_pair(encoder, &graph, tok, m)?.similarity;
            terms += 1;
        }
        if variant == LayoutObjective::MaskedPlusFull {
            total = &total - &forward_pair(encoder, &graph, tok, image)?.similarity;
            terms += 1;
        }
    }
    Ok((total, terms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub steps: usize,
    pub seed: u64,
    pub objective: LayoutObjective,
    pub mask: MaskParams,
    pub gradient_mode: GradientMode,
    /// Recompute the attention-gradient factor every this many steps and
    /// reuse it as a constant in between.
    pub relevance_every: usize,
    pub adam: AdamConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            steps: 30,
            seed: 0,
            objective: LayoutObjective::Explainability,
            mask: MaskParams::default(),
            gradient_mode: GradientMode::Detached,
            relevance_every: 1,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayoutResult {
    pub latent: Vec<f64>,
    pub image: Image,
    /// Final patch heatmap per object.
    pub heatmaps: Vec<Array2<f64>>,
    /// Final soft Dice of each object's mask with its box.
    pub dice: Vec<f64>,
    pub similarity: Vec<f64>,
    /// Objective value before each step, then after the last one.
    pub losses: Vec<f64>,
}

fn objective(
    image: &Var,
    objects: &[LayoutObject],
    encoder: &dyn DiffEncoder,
    cfg: &GenerateConfig,
    source: &GradientSource,
) -> Result<Var> {
    match cfg.objective {
        LayoutObjective::Explainability => Ok(layout_loss(image, objects, encoder, cfg.mask, source)?.total),
        v => Ok(baseline_losses(image, objects, encoder, v)?.0),
    }
}

/// Heatmaps, Dice and similarities of a finished image, from plain traces.
pub fn score_layout(
    image: &Image,
    objects: &[LayoutObject],
    encoder: &dyn DiffEncoder,
    mask: MaskParams,
) -> Result<(Vec<Array2<f64>>, Vec<f64>, Vec<f64>)> {
    let grid = encoder.info().patch_grid;
    let mut heatmaps = Vec::new();
    let mut dice = Vec::new();
    let mut sims = Vec::new();
    for o in objects {
        let tok = encoder.tokenize(&o.text)?;
        let (s, trace) = encoder.encode_and_trace(&tok, image)?;
        let hm = compute_relevance(&trace)?.patch_heatmap;
        dice.push(dice_term(&expl_mask(&hm, mask)?, &o.bbox.rasterize(grid))?);
        heatmaps.push(hm);
        sims.push(s);
    }
    Ok((heatmaps, dice, sims))
}

/// Descends the chosen objective on the generator latent with Adam.
pub fn generate(
    objects: &[LayoutObject],
    generator: &dyn Generator,
    encoder: &dyn DiffEncoder,
    cfg: &GenerateConfig,
) -> Result<LayoutResult> {
    check_objects(objects)?;
    if cfg.relevance_every == 0 {
        return Err(Error::invalid("relevance_every must be at least 1"));
    }
    let mut z = generator.sample_latent(cfg.seed);
    let mut opt = Adam::new(cfg.adam, z.len());
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut frozen: Option<Vec<Vec<Vec<Tensor>>>> = None;
    for step in 0..=cfg.steps {
        let graph = Graph::new();
        let zv = graph.row(&z);
        let img = generator.generate_var(&graph, &zv)?;
        let source = match &frozen {
            Some(f) if step % cfg.relevance_every != 0 => GradientSource::Frozen(f.clone()),
            _ => {
                if cfg.relevance_every > 1 && cfg.objective == LayoutObjective::Explainability {
                    let current = Image::from_var(&img, generator.image_shape())?;
                    frozen = Some(image_attention_gradients(&current, objects, encoder)?);
                }
                GradientSource::Mode(cfg.gradient_mode)
            }
        };
        let loss = objective(&img, objects, encoder, cfg, &source)?;
        check_finite(loss.item(), step, &z)?;
        losses.push(loss.item());
        if step == cfg.steps {
            break;
        }
        let g = graph.grad(&loss, &[zv], false)?;
        let g: Vec<f64> = g[0].value().iter().copied().collect();
        opt.step(&mut z, &g);
    }
    let image = generator.generate(&z)?;
    let (heatmaps, dice, similarity) = score_layout(&image, objects, encoder, cfg.mask)?;
    Ok(LayoutResult {
        latent: z,
        image,
        heatmaps,
        dice,
        similarity,
        losses,
    })
}
