// SPDX-License-Identifier: MIT OR Apache-2.0

//! Few-shot prompt tuning with learned context vectors and a class-name
//! relevance term.
//!
//! A prompt is `[prefix] v_1..v_M [class tokens] [suffix]` (label at the
//! end) or `[prefix] v_1..v_{M/2} [class] v_{M/2+1}..v_M [suffix]` (label in
//! the middle), where prefix and suffix are the tokenizer's special tokens.

pub mod train;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{DiffEncoder, Encoded, Image};
use crate::presets;
use crate::relevance::diff::{accumulate, attention_gradients, token_scores, GradientMode};

pub use train::{evaluate, mean_class_score, train, Dataset, StepLog, TrainResult, TunerConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPosition {
    Middle,
    #[default]
    End,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// One context shared by all classes.
    #[default]
    Unified,
    /// One context per class.
    Csc,
}

/// `M x d` learned context and where the label goes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub context: Vec<Vec<f64>>,
    pub label_position: LabelPosition,
}

impl PromptTemplate {
    pub fn new(context: Array2<f64>, label_position: LabelPosition) -> Result<Self> {
        let m = context.nrows();
        if m == 0 {
            return Err(Error::invalid("prompt needs at least one context vector"));
        }
        if label_position == LabelPosition::Middle && m % 2 != 0 {
            return Err(Error::invalid("middle label position needs an even context length"));
        }
        Ok(PromptTemplate {
            context: context.rows().into_iter().map(|r| r.to_vec()).collect(),
            label_position,
        })
    }

    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    pub fn context_array(&self) -> Array2<f64> {
        let d = self.context.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.context.iter().flatten().copied().collect();
        Array2::from_shape_vec((self.len(), d), flat).expect("rectangular context")
    }

    /// Context vectors before the label.
    pub fn split(&self) -> usize {
        match self.label_position {
            LabelPosition::Middle => self.len() / 2,
            LabelPosition::End => self.len(),
        }
    }
}

/// Unified or per-class templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub mode: PromptMode,
    pub templates: Vec<PromptTemplate>,
}

impl PromptSet {
    pub fn for_class(&self, c: usize) -> &PromptTemplate {
        match self.mode {
            PromptMode::Unified => &self.templates[0],
            PromptMode::Csc => &self.templates[c],
        }
    }
}

/// Tokenized class name split around its special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTokens {
    pub name: String,
    pub prefix: Vec<u32>,
    pub class: Vec<u32>,
    pub suffix: Vec<u32>,
    /// Offset of the end-of-text token within `suffix`.
    pub eot_in_suffix: usize,
}

/// Ordered class names with their tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub classes: Vec<ClassTokens>,
}

impl LabelSet {
    pub fn new(names: &[String], encoder: &dyn DiffEncoder) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("label set is empty"));
        }
        let classes = names
            .iter()
            .map(|name| {
                let t = encoder.tokenize(name)?;
                let positions: Vec<usize> = t.spans.iter().flat_map(|s| s.token_indices.iter().copied()).collect();
                let (Some(&first), Some(&last)) = (positions.first(), positions.last()) else {
                    return Err(Error::invalid(format!("class name `{name}` has no tokens")));
                };
                if t.eot_index <= last {
                    return Err(Error::invalid(format!("class name `{name}`: end-of-text precedes the name")));
                }
                Ok(ClassTokens {
                    name: name.clone(),
                    prefix: t.ids[..first].to_vec(),
                    class: t.ids[first..=last].to_vec(),
                    suffix: t.ids[last + 1..].to_vec(),
                    eot_in_suffix: t.eot_index - last - 1,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LabelSet { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Sequence layout of one filled prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLayout {
    pub len: usize,
    pub eot_index: usize,
    pub class_positions: Vec<usize>,
    pub context_positions: Vec<usize>,
    /// Prefix and suffix positions (start, end and padding tokens).
    pub special_positions: Vec<usize>,
}

impl PromptLayout {
    /// Every position that is neither class token nor special.
    pub fn other_positions(&self) -> Vec<usize> {
        (0..self.len)
            .filter(|p| !self.class_positions.contains(p) && !self.special_positions.contains(p))
            .collect()
    }
}

pub fn prompt_layout(m: usize, split: usize, class: &ClassTokens) -> PromptLayout {
    let p = class.prefix.len();
    let k = class.class.len();
    let s = class.suffix.len();
    let len = p + m + k + s;
    let class_start = p + split;
    let class_positions: Vec<usize> = (class_start..class_start + k).collect();
    let context_positions = (p..p + split).chain(class_start + k..class_start + k + (m - split)).collect();
    let mut special_positions: Vec<usize> = (0..p).collect();
    special_positions.extend(len - s..len);
    PromptLayout {
        len,
        eot_index: len - s + class.eot_in_suffix,
        class_positions,
        context_positions,
        special_positions,
    }
}

/// Input embeddings of a filled prompt with `context` spliced in.
pub fn prompt_embeddings(
    encoder: &dyn DiffEncoder,
    graph: &Graph,
    context: &Var,
    split: usize,
    class: &ClassTokens,
) -> Result<Var> {
    let m = context.shape().0;
    let mut parts = Vec::with_capacity(5);
    let push_ids = |ids: &[u32], parts: &mut Vec<Var>| -> Result<()> {
        if !ids.is_empty() {
            parts.push(graph.leaf(encoder.token_embeddings(ids)?));
        }
        Ok(())
    };
    push_ids(&class.prefix, &mut parts)?;
    if split > 0 {
        parts.push(context.rows(0..split));
    }
    push_ids(&class.class, &mut parts)?;
    if split < m {
        parts.push(context.rows(split..m));
    }
    push_ids(&class.suffix, &mut parts)?;
    Ok(Var::concat_rows(&parts))
}

/// One class's similarity and (when requested) its class-name score.
pub struct ClassForward {
    pub similarity: Var,
    pub token_scores: Option<Var>,
    pub layout: PromptLayout,
}

/// Runs the text tower for one class prompt against fixed image features.
pub fn class_forward(
    encoder: &dyn DiffEncoder,
    graph: &Graph,
    context: &Var,
    template: &PromptTemplate,
    class: &ClassTokens,
    image: &Encoded,
    relevance: Option<GradientMode>,
) -> Result<ClassForward> {
    let max = encoder.info().max_text_tokens;
    let layout = prompt_layout(context.shape().0, template.split(), class);
    if layout.len > max {
        return Err(Error::invalid(format!(
            "prompt for `{}` needs {} tokens, encoder accepts {max}",
            class.name, layout.len
        )));
    }
    let emb = prompt_embeddings(encoder, graph, context, template.split(), class)?;
    let text = encoder.encode_text(graph, &emb, layout.eot_index)?;
    let similarity = encoder.score(&text, image);
    let token_scores = match relevance {
        None => None,
        Some(mode) => {
            let grads = attention_gradients(&similarity, &text.attention, mode)?;
            let r = accumulate(&text.attention, &grads, &[])?;
            Some(token_scores(&r, layout.eot_index, &layout.special_positions))
        }
    };
    Ok(ClassForward {
        similarity,
        token_scores,
        layout,
    })
}

/// Softmax of `logit_scale * similarities`.
pub fn class_distribution(similarities: &[f64], logit_scale: f64) -> Result<Vec<f64>> {
    if similarities.is_empty() {
        return Err(Error::invalid("class_distribution over an empty label set"));
    }
    let m = similarities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = similarities.iter().map(|s| ((s - m) * logit_scale).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Class-name score: best class-token relevance over the summed relevance
/// of every other position.
pub fn class_name_score(scores: &Array1<f64>, class_positions: &[usize], other_positions: &[usize]) -> Result<f64> {
    if class_positions.is_empty() {
        return Err(Error::invalid("class has no token positions"));
    }
    let num = class_positions.iter().map(|&p| scores[p]).fold(f64::NEG_INFINITY, f64::max);
    let den: f64 = other_positions.iter().map(|&p| scores[p]).sum();
    if den < presets::DENOMINATOR_EPS {
        return Err(Error::DegenerateRelevance { denominator: den });
    }
    Ok(num / den)
}

/// [`class_name_score`] on the tape.
pub fn class_name_score_var(scores: &Var, layout: &PromptLayout) -> Result<Var> {
    let others = layout.other_positions();
    let values = scores.value();
    let den_value: f64 = others.iter().map(|&p| values[[0, p]]).sum();
    if den_value < presets::DENOMINATOR_EPS {
        return Err(Error::DegenerateRelevance { denominator: den_value });
    }
    let num = scores.gather(layout.class_positions.iter().copied().collect(), (1, layout.class_positions.len())).max_all();
    let den = scores.gather(others.iter().copied().collect(), (1, others.len())).sum();
    Ok(&num / &den)
}

/// Counterfactual classes for one image: every other class when there are
/// at most `cap` of them, otherwise `cap` drawn uniformly without replacement.
pub fn sample_negatives(rng: &mut impl Rng, n_classes: usize, gt: usize, cap: usize) -> Vec<usize> {
    let others: Vec<usize> = (0..n_classes).filter(|&c| c != gt).collect();
    if others.len() <= cap {
        return others;
    }
    let mut picked: Vec<usize> = sample(rng, others.len(), cap).into_iter().map(|i| others[i]).collect();
    picked.sort_unstable();
    picked
}

/// Parts of the loss on one image.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub total: Var,
    pub cross_entropy: f64,
    /// Class-name score of the true class, if it was computed.
    pub gt_score: Option<f64>,
    pub skipped_terms: usize,
}

/// Cross-entropy over classes plus `lambda * (-S(gt) + sum_neg S(c))`.
/// With `lambda == 0` no relevance is computed.
#[allow(clippy::too_many_arguments)]
pub fn image_loss(
    encoder: &dyn DiffEncoder,
    graph: &Graph,
    contexts: &[Var],
    prompts: &PromptSet,
    labels: &LabelSet,
    image: &Encoded,
    gt: usize,
    negatives: &[usize],
    lambda: f64,
    logit_scale: f64,
    mode: GradientMode,
) -> Result<ImageLoss> {
    let context_of = |c: usize| match prompts.mode {
        PromptMode::Unified => &contexts[0],
        PromptMode::Csc => &contexts[c],
    };
    let needs_relevance = |c: usize| lambda != 0.0 && (c == gt || negatives.contains(&c));
    let mut sims = Vec::with_capacity(labels.len());
    let mut scores: Vec<Option<Var>> = Vec::with_capacity(labels.len());
    let mut layouts = Vec::with_capacity(labels.len());
    for (c, class) in labels.classes.iter().enumerate() {
        let rel = needs_relevance(c).then_some(mode);
        let f = class_forward(encoder, graph, context_of(c), prompts.for_class(c), class, image, rel)?;
        sims.push(f.similarity);
        scores.push(f.token_scores);
        layouts.push(f.layout);
    }
    let logits = Var::concat_cols(&sims).scale(logit_scale);
    let ce = &logits.log_sum_exp() - &sims[gt].scale(logit_scale);
    let cross_entropy = ce.item();
    let mut total = ce;
    let mut gt_score = None;
    let mut skipped = 0;
    if lambda != 0.0 {
        let mut expl = graph.scalar(0.0);
        for c in std::iter::once(gt).chain(negatives.iter().copied()) {
            let ts = scores[c].as_ref().expect("relevance computed for sampled classes");
            match class_name_score_var(ts, &layouts[c]) {
                Ok(s) => {
                    if c == gt {
                        gt_score = Some(s.item());
                        expl = &expl - &s;
                    } else {
                        expl = &expl + &s;
                    }
                }
                Err(Error::DegenerateRelevance { denominator }) => {
                    log::warn!("class `{}`: relevance denominator {denominator:e}; term skipped", labels.classes[c].name);
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        total = &total + &expl.scale(lambda);
    }
    Ok(ImageLoss {
        total,
        cross_entropy,
        gt_score,
        skipped_terms: skipped,
    })
}

/// Pooled image features as a constant on `graph`.
pub fn image_features(encoder: &dyn DiffEncoder, image: &Image) -> Result<Array2<f64>> {
    let g = Graph::new();
    let enc = encoder.encode_image(&g, &image.to_var(&g))?;
    Ok(enc.features.value().as_ref().clone())
}

pub fn constant_image(graph: &Graph, features: &Array2<f64>) -> Encoded {
    Encoded {
        features: graph.leaf(features.clone()),
        attention: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn distribution_cases() {
        let u = class_distribution(&[0.3; 4], 1.0).unwrap();
        assert!(u.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = class_distribution(&[0.2, 0.2 + 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert!(class_distribution(&[], 1.0).is_err());
    }

    #[test]
    fn class_score_cases() {
        let s = array![0.0, 0.6, 0.5, 0.7, 0.0];
        assert!((class_name_score(&s, &[1], &[2, 3]).unwrap() - 0.5).abs() < 1e-15);
        let doubled = s.mapv(|v| v * 2.0);
        assert_eq!(class_name_score(&doubled, &[1], &[2, 3]).unwrap(), class_name_score(&s, &[1], &[2, 3]).unwrap());
        let only_class = array![0.0, 0.6, 0.0, 0.0];
        assert!(matches!(
            class_name_score(&only_class, &[1], &[2]),
            Err(Error::DegenerateRelevance { .. })
        ));
    }

    #[test]
    fn layouts() {
        let class = ClassTokens {
            name: "dog".into(),
            prefix: vec![1],
            class: vec![7, 8],
            suffix: vec![2],
            eot_in_suffix: 0,
        };
        let mid = prompt_layout(4, 2, &class);
        assert_eq!(mid.class_positions, vec![3, 4]);
        assert_eq!(mid.context_positions, vec![1, 2, 5, 6]);
        assert_eq!(mid.eot_index, 7);
        assert_eq!(mid.other_positions(), vec![1, 2, 5, 6]);
        let end = prompt_layout(4, 4, &class);
        assert_eq!(end.class_positions, vec![5, 6]);
        assert_eq!(end.context_positions, vec![1, 2, 3, 4]);
        assert!(PromptTemplate::new(Array2::zeros((3, 2)), LabelPosition::Middle).is_err());
    }

    #[test]
    fn negatives_exact_below_cap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_negatives(&mut rng, 5, 2, 16), vec![0, 1, 3, 4]);
        let s = sample_negatives(&mut rng, 40, 0, 16);
        assert_eq!(s.len(), 16);
        assert!(!s.contains(&0));
        assert!(sample_negatives(&mut rng, 1, 0, 16).is_empty());
    }

    use rand::SeedableRng;
}
