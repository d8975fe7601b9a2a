// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean normalized word relevance per part-of-speech tag.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, Image};
use crate::relevance::{compute_relevance, word_scores};

/// Tags reported only when they occur at least this often.
pub const MIN_TAG_COUNT: usize = 20;

/// Assigns one tag per word.
pub trait PosTagger: Send + Sync {
    fn tag(&self, words: &[String]) -> Result<Vec<String>>;
}

/// Penn-style tags from a fixed closed-class lexicon plus suffix rules;
/// anything unmatched is tagged `NN`.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    extra: BTreeMap<String, String>,
}

const LEXICON: &[(&str, &str)] = &[
    ("a", "DT"), ("an", "DT"), ("the", "DT"), ("this", "DT"), ("that", "DT"), ("some", "DT"),
    ("with", "IN"), ("of", "IN"), ("in", "IN"), ("on", "IN"), ("at", "IN"), ("over", "IN"),
    ("under", "IN"), ("near", "IN"), ("by", "IN"), ("from", "IN"), ("for", "IN"), ("next", "JJ"),
    ("and", "CC"), ("or", "CC"), ("to", "TO"), ("is", "VBZ"), ("are", "VBP"), ("sits", "VBZ"),
    ("stands", "VBZ"), ("he", "PRP"), ("she", "PRP"), ("it", "PRP"), ("they", "PRP"),
    ("his", "PRP$"), ("her", "PRP$"), ("its", "PRP$"), ("two", "CD"), ("three", "CD"),
    ("one", "CD"), ("red", "JJ"), ("blue", "JJ"), ("green", "JJ"), ("yellow", "JJ"),
    ("purple", "JJ"), ("black", "JJ"), ("white", "JJ"), ("brown", "JJ"), ("blond", "JJ"),
    ("small", "JJ"), ("large", "JJ"), ("big", "JJ"), ("old", "JJ"), ("young", "JJ"),
    ("happy", "JJ"), ("tall", "JJ"), ("short", "JJ"), ("long", "JJ"), ("curly", "JJ"),
    ("very", "RB"),
];

impl LexiconTagger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Extra `word -> tag` entries take precedence over the builtin lexicon.
    pub fn with_entries(extra: BTreeMap<String, String>) -> Self {
        LexiconTagger { extra }
    }

    fn tag_word(&self, word: &str) -> String {
        let w = word.to_lowercase();
        if let Some(t) = self.extra.get(&w) {
            return t.clone();
        }
        if let Some((_, t)) = LEXICON.iter().find(|(k, _)| *k == w) {
            return t.to_string();
        }
        if w.chars().all(|c| c.is_ascii_digit()) {
            "CD"
        } else if w.ends_with("ly") {
            "RB"
        } else if w.ends_with("ing") {
            "VBG"
        } else if w.ends_with("ed") {
            "VBD"
        } else if w.ends_with("s") && w.len() > 3 && !w.ends_with("ss") {
            "NNS"
        } else {
            "NN"
        }
        .to_string()
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, words: &[String]) -> Result<Vec<String>> {
        Ok(words.iter().map(|w| self.tag_word(w)).collect())
    }
}

/// Whether a tag denotes a noun (Penn `NN*` or universal `NOUN`).
pub fn is_noun(tag: &str) -> bool {
    tag.starts_with("NN") || tag == "NOUN"
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PosDistribution {
    /// Mean normalized relevance of tags with enough occurrences.
    pub means: BTreeMap<String, f64>,
    /// Occurrences of every tag seen, including dropped ones.
    pub counts: BTreeMap<String, usize>,
    /// Captions skipped after a tagger or relevance failure.
    pub skipped: usize,
}

/// Divides word scores by their maximum; `None` if every score is zero.
pub fn normalize_scores(scores: &[f64]) -> Option<Vec<f64>> {
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    (max > 0.0).then(|| scores.iter().map(|s| s / max).collect())
}

/// Aggregates already-normalized `(tags, scores)` pairs per caption.
pub fn aggregate_tags(samples: &[(Vec<String>, Vec<f64>)], min_count: usize) -> PosDistribution {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (tags, scores) in samples {
        for (t, s) in tags.iter().zip(scores) {
            *sums.entry(t.clone()).or_default() += s;
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    let means = sums
        .into_iter()
        .filter(|(t, _)| counts[t] >= min_count)
        .map(|(t, s)| {
            let n = counts[&t] as f64;
            (t, s / n)
        })
        .collect();
    PosDistribution {
        means,
        counts,
        skipped: 0,
    }
}

/// Normalized word scores and tags of one caption.
pub fn caption_scores(
    caption: &str,
    image: &Image,
    encoder: &dyn Encoder,
    tagger: &dyn PosTagger,
) -> Result<(Vec<String>, Vec<f64>)> {
    let tokens = encoder.tokenize(caption)?;
    let (_, trace) = encoder.encode_and_trace(&tokens, image)?;
    let maps = compute_relevance(&trace)?;
    let scores = word_scores(&maps.token_scores, &tokens.spans)?;
    let words: Vec<String> = tokens.spans.iter().map(|s| s.word.clone()).collect();
    let tags = tagger.tag(&words)?;
    if tags.len() != words.len() {
        return Err(Error::ProtocolViolation(format!(
            "tagger returned {} tags for {} words",
            tags.len(),
            words.len()
        )));
    }
    let norm = normalize_scores(&scores)
        .ok_or_else(|| Error::DegenerateInput(format!("caption `{caption}` has zero word relevance")))?;
    Ok((tags, norm))
}

pub fn pos_distribution(
    corpus: &[(String, Image)],
    encoder: &dyn Encoder,
    tagger: &dyn PosTagger,
    min_count: usize,
) -> PosDistribution {
    let per_caption: Vec<Result<(Vec<String>, Vec<f64>)>> = corpus
        .par_iter()
        .map(|(caption, image)| caption_scores(caption, image, encoder, tagger))
        .collect();
    let mut ok = Vec::with_capacity(per_caption.len());
    let mut skipped = 0;
    for (r, (caption, _)) in per_caption.into_iter().zip(corpus) {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => {
                log::warn!("skipping caption `{caption}`: {e}");
                skipped += 1;
            }
        }
    }
    let mut dist = aggregate_tags(&ok, min_count);
    dist.skipped = skipped;
    dist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyBiModalModel;

    fn tags(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn constructed_fixture_gives_noun_one_other_half() {
        let sample = (tags(&["DT", "JJ", "NN"]), vec![0.5, 0.5, 1.0]);
        let corpus = vec![sample; 20];
        let d = aggregate_tags(&corpus, MIN_TAG_COUNT);
        assert_eq!(d.means.len(), 3);
        assert_eq!(d.means["NN"], 1.0);
        assert_eq!(d.means["DT"], 0.5);
        assert_eq!(d.means["JJ"], 0.5);
    }

    #[test]
    fn rare_tags_dropped() {
        let d = aggregate_tags(&[(tags(&["NN", "JJ"]), vec![1.0, 0.4])], MIN_TAG_COUNT);
        assert!(d.means.is_empty());
        assert_eq!(d.counts["JJ"], 1);
        let d = aggregate_tags(&[(tags(&["NN", "JJ"]), vec![1.0, 0.4])], 1);
        assert_eq!(d.means["JJ"], 0.4);
    }

    #[test]
    fn normalization_max_is_one() {
        let n = normalize_scores(&[0.2, 0.8, 0.4]).unwrap();
        assert_eq!(n.iter().cloned().fold(0.0, f64::max), 1.0);
        assert!(normalize_scores(&[0.0, 0.0]).is_none());
    }

    #[test]
    fn identical_captions_match_single_caption() {
        let m = ToyBiModalModel::with_seed(0);
        let img = Image::filled((3, 16, 16), 0.4);
        let tagger = LexiconTagger::new();
        let (t, s) = caption_scores("a dog on the grass", &img, &m, &tagger).unwrap();
        let corpus: Vec<_> = (0..3).map(|_| ("a dog on the grass".to_string(), img.clone())).collect();
        let d = pos_distribution(&corpus, &m, &tagger, 1);
        for (tag, score) in t.iter().zip(&s) {
            let same: Vec<f64> = t.iter().zip(&s).filter(|(u, _)| *u == tag).map(|(_, v)| *v).collect();
            let expect = same.iter().sum::<f64>() / same.len() as f64;
            assert!((d.means[tag] - expect).abs() < 1e-12, "{tag} {score}");
        }
    }

    #[test]
    fn lexicon_tags() {
        let t = LexiconTagger::new();
        let out = t.tag(&tags(&["a", "person", "with", "purple", "hair"])).unwrap();
        assert_eq!(out, tags(&["DT", "NN", "IN", "JJ", "NN"]));
        assert!(is_noun("NNS") && is_noun("NOUN") && !is_noun("JJ"));
    }
}
