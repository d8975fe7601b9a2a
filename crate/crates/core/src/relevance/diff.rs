// SPDX-License-Identifier: MIT OR Apache-2.0

//! Relevance maps as tape expressions, for use inside losses.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// How losses built on relevance treat the attention gradient `∇A`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// `∇A` is a constant; losses backpropagate through `A` only.
    #[default]
    Detached,
    /// Second order: differentiate through `∇A` as well.
    Full,
}

/// `∂ similarity / ∂ A` for every captured head, grouped like `taps`.
pub fn attention_gradients(
    similarity: &Var,
    taps: &[Vec<Var>],
    mode: GradientMode,
) -> Result<Vec<Vec<Var>>> {
    let flat: Vec<Var> = taps.iter().flatten().cloned().collect();
    let grads = similarity
        .graph()
        .grad(similarity, &flat, mode == GradientMode::Full)?;
    let mut it = grads.into_iter();
    Ok(taps
        .iter()
        .map(|layer| layer.iter().map(|_| it.next().expect("one grad per tap")).collect())
        .collect())
}

/// Places precomputed gradient arrays on the tape as constants.
pub fn frozen_gradients(graph: &crate::autodiff::Graph, arrays: &[Vec<Tensor>]) -> Vec<Vec<Var>> {
    arrays
        .iter()
        .map(|layer| layer.iter().map(|a| graph.leaf(a.clone())).collect())
        .collect()
}

/// `mean_h (∇A ⊙ A)⁺` for one layer, with padded rows and columns zeroed.
pub fn head_aggregate(attention: &[Var], gradients: &[Var], padding: &[usize]) -> Result<Var> {
    if attention.is_empty() || attention.len() != gradients.len() {
        return Err(Error::invalid("head_aggregate: head count mismatch"));
    }
    let mut total: Option<Var> = None;
    for (a, g) in attention.iter().zip(gradients) {
        if a.shape() != g.shape() {
            return Err(Error::invalid("head_aggregate: attention/gradient shape mismatch"));
        }
        let term = (g * a).relu();
        total = Some(match total {
            Some(t) => &t + &term,
            None => term,
        });
    }
    let mean = total.expect("nonempty").scale(1.0 / attention.len() as f64);
    if padding.is_empty() {
        return Ok(mean);
    }
    let (n, _) = mean.shape();
    let mut keep = Array2::ones((n, n));
    for &p in padding {
        keep.row_mut(p).fill(0.0);
        keep.column_mut(p).fill(0.0);
    }
    Ok(&mean * &mean.graph().leaf(keep))
}

/// Identity-initialized relevance propagated through `layers` in order.
pub fn accumulate(attention: &[Vec<Var>], gradients: &[Vec<Var>], padding: &[usize]) -> Result<Var> {
    let first = attention
        .first()
        .and_then(|l| l.first())
        .ok_or_else(|| Error::invalid("relevance over an empty layer list"))?;
    if attention.len() != gradients.len() {
        return Err(Error::invalid("layer count mismatch between attention and gradients"));
    }
    let (n, _) = first.shape();
    let mut r = first.graph().leaf(Array2::eye(n));
    for (a, g) in attention.iter().zip(gradients) {
        let a_bar = head_aggregate(a, g, padding)?;
        r = &r + &a_bar.matmul(&r);
    }
    Ok(r)
}

/// End-of-text row of the text map with `masked` positions zeroed, `1 x n`.
pub fn token_scores(text_map: &Var, eot_index: usize, masked: &[usize]) -> Var {
    let row = text_map.row(eot_index);
    let n = row.shape().1;
    let mut keep = Array2::ones((1, n));
    for &p in masked {
        keep[[0, p]] = 0.0;
    }
    &row * &row.graph().leaf(keep)
}

/// Classification row of the image map without its own column, as `grid`.
pub fn patch_heatmap(image_map: &Var, cls_index: usize, grid: (usize, usize)) -> Var {
    let n = image_map.shape().1;
    let idx: Rc<[usize]> = (0..n)
        .filter(|&j| j != cls_index)
        .map(|j| cls_index * n + j)
        .collect();
    image_map.gather(idx, grid)
}

/// Word relevance: max over the word's token positions, as 1x1.
pub fn word_score(token_scores: &Var, positions: &[usize]) -> Var {
    let idx: Rc<[usize]> = positions.iter().copied().collect();
    token_scores.gather(idx, (1, positions.len())).max_all()
}
