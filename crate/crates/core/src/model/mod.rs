// SPDX-License-Identifier: MIT OR Apache-2.0

//! Encoder and generator contracts plus their reference implementations.
//!
//! Every pipeline talks to an image-text encoder through [`Encoder`]
//! (tokenize, trace, similarity). Pipelines that optimize through relevance
//! need [`DiffEncoder`], which exposes the forward pass on an autodiff tape
//! with the per-head attention matrices tapped.

pub mod generator;
pub mod plugin;
pub mod tokenizer;
pub mod toy;
pub mod wire;

use std::path::Path;

use image::{imageops::FilterType, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::relevance::diff::{attention_gradients, GradientMode};
use crate::relevance::{AttentionRecord, EncoderTrace, WordSpan};

pub use generator::{Generator, ToyGenerator};
pub use plugin::{PluginRegistry, PluginSpec};
pub use toy::{AttentionPerturbation, Modality, ToyBiModalModel, ToyConfig};

/// `[channels, height, width]` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(pub Array3<f64>);

impl Image {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Image(Array3::zeros(shape))
    }

    pub fn filled(shape: (usize, usize, usize), value: f64) -> Self {
        Image(Array3::from_elem(shape, value))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    /// The image as a `channels x (height*width)` tape leaf.
    pub fn to_var(&self, graph: &Graph) -> Var {
        graph.leaf(self.to_matrix())
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let (c, h, w) = self.shape();
        self.0
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous image")
    }

    pub fn from_matrix(m: &Array2<f64>, shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = shape;
        if m.dim() != (c, h * w) {
            return Err(Error::invalid(format!(
                "matrix {:?} does not hold a {c}x{h}x{w} image",
                m.dim()
            )));
        }
        let data = m.as_standard_layout().into_owned();
        Ok(Image(data.into_shape_with_order((c, h, w)).expect("checked")))
    }

    pub fn from_var(v: &Var, shape: (usize, usize, usize)) -> Result<Self> {
        Self::from_matrix(&v.value(), shape)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (c, h, w) = self.shape();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.0[[ch.min(c - 1), y as usize, x as usize]];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Loads any supported file and resizes it to `shape` (3 channels).
    pub fn load(path: &Path, shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = shape;
        if c != 3 {
            return Err(Error::invalid("image loading supports 3-channel encoders only"));
        }
        let img = image::open(path)?.to_rgb8();
        let img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        let mut out = Array3::zeros(shape);
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                out[[ch, y as usize, x as usize]] = px[ch] as f64 / 255.0;
            }
        }
        Ok(Image(out))
    }
}

/// Token ids of one text plus the positions each word maps to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub spans: Vec<WordSpan>,
    pub eot_index: usize,
    pub sot_index: Option<usize>,
    #[serde(default)]
    pub padding: Vec<usize>,
}

impl Tokenized {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Special positions excluded from word relevance.
    pub fn special_positions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.sot_index.into_iter().collect();
        out.push(self.eot_index);
        out.extend(self.padding.iter().copied());
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Spans of the given words; every word must occur in the text.
    pub fn spans_for(&self, words: &[String]) -> Result<Vec<WordSpan>> {
        words
            .iter()
            .map(|w| {
                let key = tokenizer::normalize_word(w);
                self.spans
                    .iter()
                    .find(|s| s.word == key)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("word `{w}` is not in the tokenized text")))
            })
            .collect()
    }
}

/// Static properties an encoder declares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderInfo {
    pub image_shape: (usize, usize, usize),
    pub patch_grid: (usize, usize),
    pub max_text_tokens: usize,
    pub cls_index: usize,
}

/// Image-text matching model that can report its attention trace.
pub trait Encoder: Send + Sync {
    fn info(&self) -> EncoderInfo;

    fn tokenize(&self, text: &str) -> Result<Tokenized>;

    /// Similarity together with all attention matrices and their gradients.
    fn encode_and_trace(&self, tokens: &Tokenized, image: &Image) -> Result<(f64, EncoderTrace)>;

    fn similarity(&self, tokens: &Tokenized, image: &Image) -> Result<f64>;
}

/// Output of one tower on a tape.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `1 x d` pooled embedding.
    pub features: Var,
    /// `[layer][head]` attention probabilities, `n x n` each.
    pub attention: Vec<Vec<Var>>,
}

/// An [`Encoder`] whose forward pass can run on an autodiff tape.
pub trait DiffEncoder: Encoder {
    /// Input embeddings (without positions) for token ids, `n x d`.
    fn token_embeddings(&self, ids: &[u32]) -> Result<Array2<f64>>;

    fn encode_text(&self, graph: &Graph, embeddings: &Var, eot_index: usize) -> Result<Encoded>;

    /// `image` is `channels x (height*width)`.
    fn encode_image(&self, graph: &Graph, image: &Var) -> Result<Encoded>;

    /// Similarity of two pooled embeddings, 1x1.
    fn score(&self, text: &Encoded, image: &Encoded) -> Var;
}

/// Both towers and their similarity on one tape.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub similarity: Var,
    pub text: Encoded,
    pub image: Encoded,
}

pub fn forward_pair(
    encoder: &dyn DiffEncoder,
    graph: &Graph,
    tokens: &Tokenized,
    image: &Var,
) -> Result<PairForward> {
    let emb = graph.leaf(encoder.token_embeddings(&tokens.ids)?);
    let text = encoder.encode_text(graph, &emb, tokens.eot_index)?;
    let img = encoder.encode_image(graph, image)?;
    let similarity = encoder.score(&text, &img);
    Ok(PairForward {
        similarity,
        text,
        image: img,
    })
}

fn to_records(attention: &[Vec<Var>], grads: &[Vec<Var>]) -> Result<Vec<AttentionRecord>> {
    attention
        .iter()
        .zip(grads)
        .map(|(heads, gheads)| {
            let (n, _) = heads[0].shape();
            let mut a = Array3::zeros((heads.len(), n, n));
            let mut g = Array3::zeros((heads.len(), n, n));
            for (h, (av, gv)) in heads.iter().zip(gheads).enumerate() {
                a.index_axis_mut(ndarray::Axis(0), h).assign(av.value().as_ref());
                g.index_axis_mut(ndarray::Axis(0), h).assign(gv.value().as_ref());
            }
            AttentionRecord::new(a, g)
        })
        .collect()
}

/// Builds an [`EncoderTrace`] from a tape forward pass.
pub fn trace_of(
    info: &EncoderInfo,
    tokens: &Tokenized,
    forward: &PairForward,
) -> Result<EncoderTrace> {
    let mut taps: Vec<Vec<Var>> = forward.text.attention.clone();
    taps.extend(forward.image.attention.iter().cloned());
    let grads = attention_gradients(&forward.similarity, &taps, GradientMode::Detached)?;
    let n_text_layers = forward.text.attention.len();
    let text_layers = to_records(&forward.text.attention, &grads[..n_text_layers])?;
    let image_layers = to_records(&forward.image.attention, &grads[n_text_layers..])?;
    let n_image_tokens = image_layers
        .first()
        .map(|r| r.tokens())
        .unwrap_or(info.patch_grid.0 * info.patch_grid.1 + 1);
    let trace = EncoderTrace {
        similarity: forward.similarity.item(),
        text_layers,
        image_layers,
        n_text_tokens: tokens.len(),
        n_image_tokens,
        eot_index: tokens.eot_index,
        sot_index: tokens.sot_index,
        text_padding: tokens.padding.clone(),
        cls_index: info.cls_index,
        patch_grid: info.patch_grid,
    };
    trace.validate()?;
    Ok(trace)
}

/// Default [`Encoder::encode_and_trace`] for tape-based encoders.
pub fn trace_on_tape(
    encoder: &dyn DiffEncoder,
    tokens: &Tokenized,
    image: &Image,
) -> Result<(f64, EncoderTrace)> {
    let graph = Graph::new();
    let img = image.to_var(&graph);
    let fwd = forward_pair(encoder, &graph, tokens, &img)?;
    let trace = trace_of(&encoder.info(), tokens, &fwd)?;
    Ok((trace.similarity, trace))
}

pub(crate) fn check_image(info: &EncoderInfo, shape: (usize, usize, usize)) -> Result<()> {
    if shape != info.image_shape {
        return Err(Error::invalid(format!(
            "image shape {shape:?} does not match encoder input {:?}",
            info.image_shape
        )));
    }
    Ok(())
}
