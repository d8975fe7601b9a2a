// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text-guided latent editing with a semantic-neglect penalty and automatic
//! selection of its weight.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::basis::{augclip, AugPolicy};
use crate::error::{Error, Result};
use crate::model::generator::LATENT_L2;
use crate::model::{forward_pair, DiffEncoder, Generator, Image, Tokenized};
use crate::optim::{check_finite, Adam, AdamConfig};
use crate::presets;
use crate::relevance::diff::{accumulate, attention_gradients, token_scores, word_score, GradientMode};
use crate::relevance::{compute_relevance, word_scores};

const SUBJECTS: [&str; 3] = ["person", "man", "woman"];
const STOP_WORDS: [&str; 12] = ["a", "an", "the", "with", "of", "and", "in", "on", "at", "to", "for", "by"];

/// Description words of `a {person|man|woman} with {description}` or
/// `a {description} {person|man|woman}`.
pub fn semantic_set(prompt: &str) -> Result<Vec<String>> {
    let words: Vec<String> = prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let rest = match words.first().map(String::as_str) {
        Some("a" | "an" | "the") => &words[1..],
        _ => &words[..],
    };
    let description: &[String] = match rest {
        [subject, with, desc @ ..] if SUBJECTS.contains(&subject.as_str()) && with == "with" => desc,
        [desc @ .., subject] if SUBJECTS.contains(&subject.as_str()) => desc,
        _ => &[],
    };
    let out: Vec<String> = description
        .iter()
        .filter(|w| !STOP_WORDS.contains(&w.as_str()))
        .cloned()
        .collect();
    if out.is_empty() {
        return Err(Error::Format(format!(
            "`{prompt}` does not match `a <subject> with <description>` or `a <description> <subject>` with subject person, man or woman; pass the semantic set explicitly"
        )));
    }
    Ok(out)
}

/// `-lambda * mean(scores)`.
pub fn neglect_loss(scores: &[f64], lambda: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("semantic set is empty"));
    }
    Ok(-lambda * scores.iter().sum::<f64>() / scores.len() as f64)
}

/// [`neglect_loss`] on the tape from per-word relevance terms.
pub fn neglect_loss_var(graph: &Graph, scores: &[Var], lambda: f64) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::invalid("semantic set is empty"));
    }
    let mut sum = graph.scalar(0.0);
    for s in scores {
        sum = &sum + s;
    }
    Ok(sum.scale(-lambda / scores.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditRequest {
    pub prompt: String,
    /// Derived from the prompt when absent.
    pub semantic_set: Option<Vec<String>>,
    /// Drawn from the generator with `seed` when absent.
    pub source_latent: Option<Vec<f64>>,
    pub seed: u64,
    pub generator: String,
    pub sweep: Vec<f64>,
    pub steps: usize,
    /// Weight per generator regularizer; unlisted ones are off.
    pub regularizers: BTreeMap<String, f64>,
    pub adam: AdamConfig,
    pub gradient_mode: GradientMode,
    /// Rank sweep results by augmentation-averaged similarity.
    pub augmented_selection: bool,
    pub augmentation: AugPolicy,
}

impl Default for EditRequest {
    fn default() -> Self {
        EditRequest {
            prompt: String::new(),
            semantic_set: None,
            source_latent: None,
            seed: 0,
            generator: "toy-generator".into(),
            sweep: presets::EDIT_LAMBDA_SWEEP.to_vec(),
            steps: 40,
            regularizers: BTreeMap::from([(LATENT_L2.to_string(), 0.01)]),
            adam: AdamConfig::default(),
            gradient_mode: GradientMode::Detached,
            augmented_selection: false,
            augmentation: AugPolicy::default(),
        }
    }
}

/// Resolved inputs shared by all sweep branches.
#[derive(Debug, Clone)]
pub struct EditSetup {
    pub tokens: Tokenized,
    pub words: Vec<String>,
    pub positions: Vec<Vec<usize>>,
    pub source_latent: Vec<f64>,
    pub source_image: Image,
}

impl EditRequest {
    pub fn setup(&self, encoder: &dyn DiffEncoder, generator: &dyn Generator) -> Result<EditSetup> {
        if self.sweep.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("sweep values must be finite and nonnegative"));
        }
        let words = match &self.semantic_set {
            Some(s) if s.is_empty() => return Err(Error::invalid("semantic set is empty")),
            Some(s) => s.clone(),
            None => semantic_set(&self.prompt)?,
        };
        let tokens = encoder.tokenize(&self.prompt)?;
        let positions = tokens.spans_for(&words)?.into_iter().map(|s| s.token_indices).collect();
        let source_latent = match &self.source_latent {
            Some(z) if z.len() != generator.latent_dim() => {
                return Err(Error::invalid(format!(
                    "source latent has {} entries, generator expects {}",
                    z.len(),
                    generator.latent_dim()
                )))
            }
            Some(z) => z.clone(),
            None => generator.sample_latent(self.seed),
        };
        let source_image = generator.generate(&source_latent)?;
        Ok(EditSetup {
            tokens,
            words,
            positions,
            source_latent,
            source_image,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EditRun {
    pub lambda: f64,
    pub latent: Vec<f64>,
    pub image: Image,
    pub initial_similarity: f64,
    pub similarity: f64,
    /// Objective value before each step.
    pub losses: Vec<f64>,
}

fn edit_objective(
    encoder: &dyn DiffEncoder,
    generator: &dyn Generator,
    request: &EditRequest,
    setup: &EditSetup,
    graph: &Graph,
    latent: &Var,
    lambda: f64,
) -> Result<(Var, f64)> {
    let img = generator.generate_var(graph, latent)?;
    let fwd = forward_pair(encoder, graph, &setup.tokens, &img)?;
    let sim = fwd.similarity.item();
    let mut loss = fwd.similarity.scale(-1.0);
    if lambda != 0.0 {
        let grads = attention_gradients(&fwd.similarity, &fwd.text.attention, request.gradient_mode)?;
        let r = accumulate(&fwd.text.attention, &grads, &setup.tokens.padding)?;
        let ts = token_scores(&r, setup.tokens.eot_index, &setup.tokens.special_positions());
        let scores: Vec<Var> = setup.positions.iter().map(|p| word_score(&ts, p)).collect();
        loss = &loss + &neglect_loss_var(graph, &scores, lambda)?;
    }
    let reference_image = Some(&setup.source_image);
    for (name, term) in generator.regularizers(latent, &setup.source_latent, reference_image) {
        if let Some(&w) = request.regularizers.get(&name) {
            if w != 0.0 {
                loss = &loss + &term.scale(w);
            }
        }
    }
    Ok((loss, sim))
}

/// Adam descent on the latent for `request.steps` steps at weight `lambda`.
pub fn edit(
    encoder: &dyn DiffEncoder,
    generator: &dyn Generator,
    request: &EditRequest,
    setup: &EditSetup,
    lambda: f64,
) -> Result<EditRun> {
    let mut z = setup.source_latent.clone();
    let mut opt = Adam::new(request.adam, z.len());
    let mut losses = Vec::with_capacity(request.steps);
    let mut initial_similarity = None;
    for step in 0..request.steps {
        let graph = Graph::new();
        let zv = graph.row(&z);
        let (loss, sim) = edit_objective(encoder, generator, request, setup, &graph, &zv, lambda)?;
        initial_similarity.get_or_insert(sim);
        check_finite(loss.item(), step, &z)?;
        losses.push(loss.item());
        let g = graph.grad(&loss, &[zv], false)?;
        let g: Vec<f64> = g[0].value().iter().copied().collect();
        opt.step(&mut z, &g);
    }
    let image = generator.generate(&z)?;
    let similarity = encoder.similarity(&setup.tokens, &image)?;
    let initial_similarity = match initial_similarity {
        Some(s) => s,
        None => encoder.similarity(&setup.tokens, &setup.source_image)?,
    };
    Ok(EditRun {
        lambda,
        latent: z,
        image,
        initial_similarity,
        similarity,
        losses,
    })
}

/// Outcome of one sweep branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub similarity: Option<f64>,
    pub error: Option<String>,
}

/// Index of the best score; ties go to the smaller `lambda`.
pub fn select_lambda(entries: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(l, s)) in entries.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bl, bs) = entries[b];
                if s > bs || (s == bs && l < bl) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Runs `run` for every weight concurrently and keeps the best-scoring one.
pub fn auto_select<T, F, S>(sweep: &[f64], run: F, score: S) -> Result<(usize, Vec<Result<T>>)>
where
    T: Send,
    F: Fn(f64) -> Result<T> + Sync,
    S: Fn(&T) -> Result<f64>,
{
    if sweep.is_empty() {
        return Err(Error::invalid("sweep is empty"));
    }
    let runs: Vec<Result<T>> = sweep.par_iter().map(|&l| run(l)).collect();
    let mut scored = Vec::new();
    let mut index = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        match r {
            Ok(t) => {
                scored.push((sweep[i], score(t)?));
                index.push(i);
            }
            Err(e) => log::warn!("sweep branch lambda={} failed: {e}", sweep[i]),
        }
    }
    match select_lambda(&scored) {
        Some(k) => Ok((index[k], runs)),
        None => Err(Error::SweepFailure(sweep.len())),
    }
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub chosen_lambda: f64,
    pub run: EditRun,
    pub sweep: Vec<SweepEntry>,
    /// Per-branch runs in sweep order; failed branches are absent.
    pub runs: Vec<EditRun>,
    pub words: Vec<String>,
    pub relevance_before: Vec<f64>,
    pub relevance_after: Vec<f64>,
}

fn semantic_relevance(encoder: &dyn DiffEncoder, setup: &EditSetup, image: &Image) -> Result<Vec<f64>> {
    let (_, trace) = encoder.encode_and_trace(&setup.tokens, image)?;
    let maps = compute_relevance(&trace)?;
    let spans = setup.tokens.spans_for(&setup.words)?;
    word_scores(&maps.token_scores, &spans)
}

/// Edits at every swept weight and keeps the one with the highest final
/// similarity.
pub fn auto_lambda(encoder: &dyn DiffEncoder, generator: &dyn Generator, request: &EditRequest) -> Result<EditResult> {
    let setup = request.setup(encoder, generator)?;
    let (best, runs) = auto_select(
        &request.sweep,
        |l| edit(encoder, generator, request, &setup, l),
        |r: &EditRun| {
            if request.augmented_selection {
                augclip(encoder, &setup.tokens, &r.image, &request.augmentation)
            } else {
                Ok(r.similarity)
            }
        },
    )?;
    let sweep = runs
        .iter()
        .zip(&request.sweep)
        .map(|(r, &lambda)| match r {
            Ok(r) => SweepEntry {
                lambda,
                similarity: Some(r.similarity),
                error: None,
            },
            Err(e) => SweepEntry {
                lambda,
                similarity: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut kept = Vec::new();
    let mut chosen = None;
    for (i, r) in runs.into_iter().enumerate() {
        if let Ok(r) = r {
            if i == best {
                chosen = Some(kept.len());
            }
            kept.push(r);
        }
    }
    let run = kept[chosen.expect("best branch succeeded")].clone();
    let relevance_before = semantic_relevance(encoder, &setup, &setup.source_image)?;
    let relevance_after = semantic_relevance(encoder, &setup, &run.image)?;
    Ok(EditResult {
        chosen_lambda: run.lambda,
        run,
        sweep,
        runs: kept,
        words: setup.words,
        relevance_before,
        relevance_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ToyBiModalModel, ToyConfig, ToyGenerator};

    fn words(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn semantic_set_templates() {
        assert_eq!(semantic_set("A person with purple hair").unwrap(), words(&["purple", "hair"]));
        assert_eq!(semantic_set("A blond man").unwrap(), words(&["blond"]));
        assert_eq!(semantic_set("woman with a red hat").unwrap(), words(&["red", "hat"]));
        assert!(matches!(semantic_set("sunset over mountains"), Err(Error::Format(_))));
        assert!(semantic_set("a man").is_err());
    }

    #[test]
    fn neglect_values() {
        assert_eq!(neglect_loss(&[0.4, 0.2], 0.0).unwrap(), 0.0);
        assert!((neglect_loss(&[0.4, 0.2], 1.0).unwrap() + 0.3).abs() < 1e-15);
        assert_eq!(neglect_loss(&[0.0, 0.0], 3.0).unwrap(), 0.0);
        assert_eq!(neglect_loss(&[0.2, 0.4], 1.0).unwrap(), neglect_loss(&[0.4, 0.2], 1.0).unwrap());
    }

    #[test]
    fn selection_rules() {
        let sweep = presets::EDIT_LAMBDA_SWEEP;
        let entries: Vec<(f64, f64)> = sweep.iter().map(|&l| (l, -(l - 1.5) * (l - 1.5))).collect();
        assert_eq!(entries[select_lambda(&entries).unwrap()].0, 1.5);
        assert_eq!(select_lambda(&[(2.0, 0.5), (1.0, 0.5)]), Some(1));
        assert_eq!(select_lambda(&[]), None);
        let (i, _) = auto_select(&[0.0, 1.0], |l| if l == 0.0 { Err(Error::invalid("x")) } else { Ok(l) }, |v| Ok(*v)).unwrap();
        assert_eq!(i, 1);
        assert!(matches!(
            auto_select(&[0.0], |_| Err::<f64, _>(Error::invalid("x")), |v| Ok(*v)),
            Err(Error::SweepFailure(1))
        ));
    }

    fn toy() -> (ToyBiModalModel, ToyGenerator) {
        (ToyBiModalModel::new(ToyConfig::default()).unwrap(), ToyGenerator::with_seed(4))
    }

    #[test]
    fn edit_runs() {
        let (m, g) = toy();
        let req = EditRequest {
            prompt: "a person with purple hair".into(),
            steps: 15,
            ..EditRequest::default()
        };
        let setup = req.setup(&m, &g).unwrap();
        let zero = EditRequest { steps: 0, ..req.clone() };
        let r0 = edit(&m, &g, &zero, &setup, 1.0).unwrap();
        assert_eq!(r0.latent, setup.source_latent);
        let a = edit(&m, &g, &req, &setup, 0.0).unwrap();
        assert!(a.similarity >= a.initial_similarity);
        let b = edit(&m, &g, &req, &setup, 0.0).unwrap();
        assert_eq!(a.latent, b.latent);
        let single = EditRequest { sweep: vec![0.0], ..req.clone() };
        let res = auto_lambda(&m, &g, &single).unwrap();
        assert_eq!(res.chosen_lambda, 0.0);
        assert_eq!(res.run.latent, a.latent);
    }
}
