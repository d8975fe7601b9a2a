// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-weighted attention relevance for bi-modal transformers.
//!
//! Both modalities start from an identity relevance map. Every self-attention
//! layer contributes `Ā = mean_h (∇A ⊙ A)⁺`, folded in as `R ← R + Ā·R`.
//! Text token scores are the end-of-text row of the text map; the patch
//! heatmap is the classification-token row of the image map with the
//! classification column dropped.
//!
//! This module works on captured traces ([`EncoderTrace`]). The
//! [`diff`] submodule builds the same maps on an autodiff tape so they can
//! be used inside losses.

pub mod diff;
pub mod export;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for attention matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Attention probabilities of one layer and their similarity gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `[heads, n, n]`, rows sum to one per head.
    pub attention: Array3<f64>,
    /// `[heads, n, n]`, `∂ similarity / ∂ attention`.
    pub gradient: Array3<f64>,
}

impl AttentionRecord {
    pub fn new(attention: Array3<f64>, gradient: Array3<f64>) -> Result<Self> {
        let rec = AttentionRecord {
            attention,
            gradient,
        };
        rec.check_shape()?;
        Ok(rec)
    }

    pub fn heads(&self) -> usize {
        self.attention.len_of(Axis(0))
    }

    pub fn tokens(&self) -> usize {
        self.attention.len_of(Axis(1))
    }

    fn check_shape(&self) -> Result<()> {
        let (h, n, m) = self.attention.dim();
        if n != m {
            return Err(Error::invalid(format!("attention is not square: {n}x{m}")));
        }
        if h == 0 {
            return Err(Error::invalid("attention record has zero heads"));
        }
        if self.gradient.dim() != self.attention.dim() {
            return Err(Error::invalid(format!(
                "attention {:?} and gradient {:?} shapes differ",
                self.attention.dim(),
                self.gradient.dim()
            )));
        }
        Ok(())
    }

    /// Checks entries lie in `[0, 1]` and rows sum to one.
    pub fn check_stochastic(&self) -> Result<()> {
        for (h, head) in self.attention.outer_iter().enumerate() {
            for (i, row) in head.rows().into_iter().enumerate() {
                if row.iter().any(|&v| !(0.0..=1.0 + ROW_SUM_TOLERANCE).contains(&v)) {
                    return Err(Error::ProtocolViolation(format!(
                        "attention entry outside [0,1] at head {h}, row {i}"
                    )));
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::ProtocolViolation(format!(
                        "attention row sum {sum} != 1 at head {h}, row {i}"
                    )));
                }
            }
        }
        if self.gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::ProtocolViolation("non-finite attention gradient".into()));
        }
        Ok(())
    }
}

/// One forward/backward record of an image-text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    pub similarity: f64,
    pub text_layers: Vec<AttentionRecord>,
    pub image_layers: Vec<AttentionRecord>,
    pub n_text_tokens: usize,
    /// Includes the classification token.
    pub n_image_tokens: usize,
    pub eot_index: usize,
    pub sot_index: Option<usize>,
    /// Padded text positions; their rows and columns of `Ā` are zeroed.
    pub text_padding: Vec<usize>,
    pub cls_index: usize,
    pub patch_grid: (usize, usize),
}

impl EncoderTrace {
    pub fn validate(&self) -> Result<()> {
        if self.n_text_tokens == 0 || self.n_image_tokens == 0 {
            return Err(Error::invalid("trace has an empty token sequence"));
        }
        if self.eot_index >= self.n_text_tokens {
            return Err(Error::invalid(format!(
                "eot index {} out of range for {} text tokens",
                self.eot_index, self.n_text_tokens
            )));
        }
        if self.cls_index >= self.n_image_tokens {
            return Err(Error::invalid("cls index out of range"));
        }
        if let Some(sot) = self.sot_index {
            if sot >= self.n_text_tokens {
                return Err(Error::invalid("sot index out of range"));
            }
        }
        if self.text_padding.iter().any(|&p| p >= self.n_text_tokens) {
            return Err(Error::invalid("padding position out of range"));
        }
        let (rows, cols) = self.patch_grid;
        if rows * cols + 1 != self.n_image_tokens {
            return Err(Error::invalid(format!(
                "patch grid {rows}x{cols} does not match {} image tokens",
                self.n_image_tokens
            )));
        }
        for (name, layers, n) in [
            ("text", &self.text_layers, self.n_text_tokens),
            ("image", &self.image_layers, self.n_image_tokens),
        ] {
            for (l, rec) in layers.iter().enumerate() {
                rec.check_shape()?;
                if rec.tokens() != n {
                    return Err(Error::invalid(format!(
                        "{name} layer {l} has {} tokens, expected {n}",
                        rec.tokens()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Text positions whose relevance is not semantic: sot, eot and padding.
    pub fn special_text_positions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.sot_index.into_iter().collect();
        out.push(self.eot_index);
        out.extend(self.text_padding.iter().copied());
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Accumulated relevance of both modalities and derived scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMaps {
    pub text: Array2<f64>,
    pub image: Array2<f64>,
    /// End-of-text row of `text`, special positions zeroed.
    pub token_scores: Array1<f64>,
    /// Classification row of `image` without its own column, `[rows, cols]`.
    pub patch_heatmap: Array2<f64>,
}

/// A word and the token positions it was split into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub token_indices: Vec<usize>,
}

impl WordSpan {
    pub fn new(word: impl Into<String>, token_indices: Vec<usize>) -> Self {
        WordSpan {
            word: word.into(),
            token_indices,
        }
    }

    pub(crate) fn check(&self, n: usize) -> Result<()> {
        if self.token_indices.is_empty() {
            return Err(Error::invalid(format!("word `{}` has an empty span", self.word)));
        }
        if self.token_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "span of `{}` is not strictly increasing",
                self.word
            )));
        }
        if self.token_indices.iter().any(|&i| i >= n) {
            return Err(Error::invalid(format!(
                "span of `{}` exceeds {n} tokens",
                self.word
            )));
        }
        Ok(())
    }
}

pub fn init_maps(n_text: usize, n_image: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if n_text == 0 || n_image == 0 {
        return Err(Error::invalid("relevance map sizes must be positive"));
    }
    Ok((Array2::eye(n_text), Array2::eye(n_image)))
}

/// Head-averaged positive part of `gradient ⊙ attention`.
pub fn head_aggregate(rec: &AttentionRecord) -> Result<Array2<f64>> {
    rec.check_shape()?;
    let product = &rec.gradient * &rec.attention;
    let clamped = product.mapv(|v| v.max(0.0));
    Ok(clamped
        .mean_axis(Axis(0))
        .expect("at least one head"))
}

/// `R + Ā·R`.
pub fn propagate_layer(r: &Array2<f64>, a_bar: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = r.dim();
    if n != m || a_bar.dim() != (n, n) {
        return Err(Error::invalid(format!(
            "propagate_layer: R {:?} and Ā {:?} must be square and equal",
            r.dim(),
            a_bar.dim()
        )));
    }
    Ok(r + &a_bar.dot(r))
}

fn accumulate(layers: &[AttentionRecord], n: usize, padding: &[usize]) -> Result<Array2<f64>> {
    let mut r = Array2::eye(n);
    for rec in layers {
        let mut a_bar = head_aggregate(rec)?;
        for &p in padding {
            a_bar.row_mut(p).fill(0.0);
            a_bar.column_mut(p).fill(0.0);
        }
        r = propagate_layer(&r, &a_bar)?;
    }
    Ok(r)
}

pub fn compute_relevance(trace: &EncoderTrace) -> Result<RelevanceMaps> {
    trace.validate()?;
    if trace.text_layers.is_empty() || trace.image_layers.is_empty() {
        return Err(Error::invalid("trace has an empty layer list"));
    }
    let text = accumulate(&trace.text_layers, trace.n_text_tokens, &trace.text_padding)?;
    let image = accumulate(&trace.image_layers, trace.n_image_tokens, &[])?;

    let mut token_scores = text.row(trace.eot_index).to_owned();
    for p in trace.special_text_positions() {
        token_scores[p] = 0.0;
    }

    let cls_row = image.row(trace.cls_index);
    let patches: Vec<f64> = cls_row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != trace.cls_index)
        .map(|(_, &v)| v)
        .collect();
    let patch_heatmap =
        Array2::from_shape_vec(trace.patch_grid, patches).expect("grid matches token count");

    Ok(RelevanceMaps {
        text,
        image,
        token_scores,
        patch_heatmap,
    })
}

/// Word relevance: the maximum score over the word's tokens, one per span.
pub fn word_scores(token_scores: &Array1<f64>, spans: &[WordSpan]) -> Result<Vec<f64>> {
    spans
        .iter()
        .map(|span| {
            span.check(token_scores.len())?;
            Ok(span
                .token_indices
                .iter()
                .map(|&i| token_scores[i])
                .fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

/// [`word_scores`] keyed by word; repeated words keep their highest score.
pub fn word_score_map(
    token_scores: &Array1<f64>,
    spans: &[WordSpan],
) -> Result<BTreeMap<String, f64>> {
    let scores = word_scores(token_scores, spans)?;
    let mut out = BTreeMap::new();
    for (span, s) in spans.iter().zip(scores) {
        let entry = out.entry(span.word.clone()).or_insert(s);
        *entry = entry.max(s);
    }
    Ok(out)
}
