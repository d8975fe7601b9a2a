// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale bi-modal transformer used as the reference encoder.
//!
//! Two towers of residual self-attention blocks (2 heads, width 16): a text
//! tower over hashed word pieces pooled at the end-of-text token and an image
//! tower over 4x4 patches of a 3x16x16 image pooled at a prepended
//! classification token. Similarity is the cosine of the projected pooled
//! embeddings. Weights are drawn from a seeded generator.

use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::ToyTokenizer;
use super::{
    check_image, forward_pair, trace_on_tape, DiffEncoder, Encoded, Encoder, EncoderInfo, Image,
    Tokenized,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::relevance::EncoderTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub text_layers: usize,
    pub image_layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub vocab_size: u32,
    pub max_text_tokens: usize,
    pub patch_grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            text_layers: 2,
            image_layers: 2,
            heads: 2,
            embed_dim: 16,
            vocab_size: 32,
            max_text_tokens: 32,
            patch_grid: (4, 4),
            patch_size: 4,
            channels: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Additive change to one post-softmax attention entry; used to check
/// trace gradients against finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionPerturbation {
    pub modality: Modality,
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct ToyBiModalModel {
    cfg: ToyConfig,
    tokenizer: ToyTokenizer,
    token_embedding: Array2<f64>,
    text_pos: Array2<f64>,
    text_blocks: Vec<Block>,
    text_proj: Array2<f64>,
    patch_proj: Array2<f64>,
    patch_bias: Array2<f64>,
    cls_embedding: Array2<f64>,
    image_pos: Array2<f64>,
    image_blocks: Vec<Block>,
    image_proj: Array2<f64>,
    patch_index: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Block {
            wq: normal(rng, (d, d), s),
            wk: normal(rng, (d, d), s),
            wv: normal(rng, (d, d), s),
            wo: normal(rng, (d, d), s),
            w1: normal(rng, (d, 2 * d), s),
            b1: normal(rng, (1, 2 * d), 0.1),
            w2: normal(rng, (2 * d, d), 0.5 / (2.0 * d as f64).sqrt()),
        }
    }
}

/// Position rows drawn from the main stream.
const BASE_POSITIONS: usize = 16;

/// Rows past [`BASE_POSITIONS`] come from a side stream, so every other
/// weight is the same whatever the context length.
fn text_positions(rng: &mut ChaCha8Rng, seed: u64, n: usize, d: usize) -> Array2<f64> {
    let base = normal(rng, (BASE_POSITIONS, d), 0.5);
    let mut side = ChaCha8Rng::seed_from_u64(seed ^ 0x7065_7874_706f_7331);
    let extra = normal(&mut side, (n.saturating_sub(BASE_POSITIONS), d), 0.5);
    let all = ndarray::concatenate![ndarray::Axis(0), base, extra];
    all.slice(ndarray::s![..n, ..]).to_owned()
}

impl ToyBiModalModel {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        if cfg.embed_dim % cfg.heads != 0 || cfg.heads == 0 {
            return Err(Error::invalid("embed_dim must be divisible by heads"));
        }
        if cfg.vocab_size <= 3 {
            return Err(Error::invalid("vocab must leave room for word ids"));
        }
        let d = cfg.embed_dim;
        let (gr, gc) = cfg.patch_grid;
        let patches = gr * gc;
        let patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let token_embedding = normal(&mut rng, (cfg.vocab_size as usize, d), 1.0);
        let text_pos = text_positions(&mut rng, cfg.seed, cfg.max_text_tokens, d);
        let text_blocks = (0..cfg.text_layers).map(|_| Block::new(&mut rng, d)).collect();
        let text_proj = normal(&mut rng, (d, d), 1.0 / (d as f64).sqrt());
        let patch_proj = normal(&mut rng, (patch_dim, d), 4.0 / (patch_dim as f64).sqrt());
        let patch_bias = normal(&mut rng, (1, d), 0.5);
        let cls_embedding = normal(&mut rng, (1, d), 1.0);
        let image_pos = normal(&mut rng, (patches + 1, d), 0.5);
        let image_blocks = (0..cfg.image_layers).map(|_| Block::new(&mut rng, d)).collect();
        let image_proj = normal(&mut rng, (d, d), 1.0 / (d as f64).sqrt());

        let (h, w) = (gr * cfg.patch_size, gc * cfg.patch_size);
        let p = cfg.patch_size;
        let mut idx = Vec::with_capacity(patches * patch_dim);
        for py in 0..gr {
            for px in 0..gc {
                for c in 0..cfg.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(c * h * w + (py * p + dy) * w + (px * p + dx));
                        }
                    }
                }
            }
        }

        Ok(ToyBiModalModel {
            tokenizer: ToyTokenizer {
                vocab_size: cfg.vocab_size,
                max_tokens: cfg.max_text_tokens,
            },
            cfg,
            token_embedding,
            text_pos,
            text_blocks,
            text_proj,
            patch_proj,
            patch_bias,
            cls_embedding,
            image_pos,
            image_blocks,
            image_proj,
            patch_index: idx,
        })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(ToyConfig {
            seed,
            ..ToyConfig::default()
        })
        .expect("default config is valid")
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (gr, gc) = self.cfg.patch_grid;
        (
            self.cfg.channels,
            gr * self.cfg.patch_size,
            gc * self.cfg.patch_size,
        )
    }

    fn block(
        &self,
        graph: &Graph,
        block: &Block,
        x: &Var,
        mut tap: impl FnMut(usize, Var) -> Var,
    ) -> (Var, Vec<Var>) {
        let d = self.cfg.embed_dim;
        let hd = d / self.cfg.heads;
        let q = x.matmul(&graph.leaf(block.wq.clone()));
        let k = x.matmul(&graph.leaf(block.wk.clone()));
        let v = x.matmul(&graph.leaf(block.wv.clone()));
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        let mut attn = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let r = h * hd..(h + 1) * hd;
            let (qh, kh, vh) = (q.cols(r.clone()), k.cols(r.clone()), v.cols(r));
            let a = qh.matmul(&kh.t()).scale(scale).softmax_rows();
            let a = tap(h, a);
            outs.push(a.matmul(&vh));
            attn.push(a);
        }
        let mixed = Var::concat_cols(&outs).matmul(&graph.leaf(block.wo.clone()));
        let x = x + &mixed;
        let hidden = (&x.matmul(&graph.leaf(block.w1.clone())) + &graph.leaf(block.b1.clone())).tanh();
        let x = &x + &hidden.matmul(&graph.leaf(block.w2.clone()));
        (x, attn)
    }

    fn perturb(
        graph: &Graph,
        p: Option<&AttentionPerturbation>,
        modality: Modality,
        layer: usize,
        head: usize,
        a: Var,
    ) -> Var {
        match p {
            Some(p) if p.modality == modality && p.layer == layer && p.head == head => {
                let mut bump = Array2::zeros(a.shape());
                bump[[p.row, p.col]] = p.delta;
                &a + &graph.leaf(bump)
            }
            _ => a,
        }
    }

    fn text_tower(
        &self,
        graph: &Graph,
        embeddings: &Var,
        eot_index: usize,
        p: Option<&AttentionPerturbation>,
    ) -> Result<Encoded> {
        let (n, d) = embeddings.shape();
        if d != self.cfg.embed_dim {
            return Err(Error::invalid(format!("text embeddings have width {d}, expected {}", self.cfg.embed_dim)));
        }
        if n == 0 || n > self.cfg.max_text_tokens {
            return Err(Error::invalid(format!(
                "text has {n} tokens, toy encoder accepts 1..={}",
                self.cfg.max_text_tokens
            )));
        }
        if eot_index >= n {
            return Err(Error::invalid("eot index out of range"));
        }
        let pos = graph.leaf(self.text_pos.slice(ndarray::s![..n, ..]).to_owned());
        let mut x = embeddings + &pos;
        let mut attention = Vec::new();
        for (l, block) in self.text_blocks.iter().enumerate() {
            let (nx, a) = self.block(graph, block, &x, |h, a| {
                Self::perturb(graph, p, Modality::Text, l, h, a)
            });
            x = nx;
            attention.push(a);
        }
        let features = x.row(eot_index).matmul(&graph.leaf(self.text_proj.clone()));
        Ok(Encoded {
            features,
            attention,
        })
    }

    fn image_tower(
        &self,
        graph: &Graph,
        image: &Var,
        p: Option<&AttentionPerturbation>,
    ) -> Result<Encoded> {
        let (c, h, w) = self.image_shape();
        if image.shape() != (c, h * w) {
            return Err(Error::invalid(format!(
                "image matrix {:?} does not match {c}x{}",
                image.shape(),
                h * w
            )));
        }
        let (gr, gc) = self.cfg.patch_grid;
        let patch_dim = c * self.cfg.patch_size * self.cfg.patch_size;
        let patches = image.gather(Rc::from(self.patch_index.as_slice()), (gr * gc, patch_dim));
        let tokens = &patches.offset(-0.5).matmul(&graph.leaf(self.patch_proj.clone())) + &graph.leaf(self.patch_bias.clone());
        let seq = Var::concat_rows(&[graph.leaf(self.cls_embedding.clone()), tokens]);
        let mut x = &seq + &graph.leaf(self.image_pos.clone());
        let mut attention = Vec::new();
        for (l, block) in self.image_blocks.iter().enumerate() {
            let (nx, a) = self.block(graph, block, &x, |hd, a| {
                Self::perturb(graph, p, Modality::Image, l, hd, a)
            });
            x = nx;
            attention.push(a);
        }
        let features = x.row(0).matmul(&graph.leaf(self.image_proj.clone()));
        Ok(Encoded {
            features,
            attention,
        })
    }

    /// Similarity with one attention entry shifted by `delta`.
    pub fn similarity_perturbed(
        &self,
        tokens: &Tokenized,
        image: &Image,
        perturbation: &AttentionPerturbation,
    ) -> Result<f64> {
        check_image(&self.info(), image.shape())?;
        let graph = Graph::new();
        let emb = graph.leaf(self.token_embeddings(&tokens.ids)?);
        let text = self.text_tower(&graph, &emb, tokens.eot_index, Some(perturbation))?;
        let img = self.image_tower(&graph, &image.to_var(&graph), Some(perturbation))?;
        Ok(self.score(&text, &img).item())
    }
}

impl Encoder for ToyBiModalModel {
    fn info(&self) -> EncoderInfo {
        EncoderInfo {
            image_shape: self.image_shape(),
            patch_grid: self.cfg.patch_grid,
            max_text_tokens: self.cfg.max_text_tokens,
            cls_index: 0,
        }
    }

    fn tokenize(&self, text: &str) -> Result<Tokenized> {
        self.tokenizer.tokenize(text)
    }

    fn encode_and_trace(&self, tokens: &Tokenized, image: &Image) -> Result<(f64, EncoderTrace)> {
        check_image(&self.info(), image.shape())?;
        trace_on_tape(self, tokens, image)
    }

    fn similarity(&self, tokens: &Tokenized, image: &Image) -> Result<f64> {
        check_image(&self.info(), image.shape())?;
        let graph = Graph::new();
        let img = image.to_var(&graph);
        Ok(forward_pair(self, &graph, tokens, &img)?.similarity.item())
    }
}

impl DiffEncoder for ToyBiModalModel {
    fn token_embeddings(&self, ids: &[u32]) -> Result<Array2<f64>> {
        if ids.len() > self.cfg.max_text_tokens {
            return Err(Error::invalid(format!(
                "{} tokens exceed the toy limit of {}",
                ids.len(),
                self.cfg.max_text_tokens
            )));
        }
        let mut out = Array2::zeros((ids.len(), self.cfg.embed_dim));
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.cfg.vocab_size {
                return Err(Error::invalid(format!("token id {id} outside vocabulary")));
            }
            out.row_mut(r).assign(&self.token_embedding.row(id as usize));
        }
        Ok(out)
    }

    fn encode_text(&self, graph: &Graph, embeddings: &Var, eot_index: usize) -> Result<Encoded> {
        self.text_tower(graph, embeddings, eot_index, None)
    }

    fn encode_image(&self, graph: &Graph, image: &Var) -> Result<Encoded> {
        self.image_tower(graph, image, None)
    }

    fn score(&self, text: &Encoded, image: &Encoded) -> Var {
        cosine(&text.features, &image.features)
    }
}

/// Cosine similarity of two row vectors, 1x1.
pub fn cosine(a: &Var, b: &Var) -> Var {
    let num = a.dot(b);
    let den = &a.square().sum().sqrt() * &b.square().sum().sqrt();
    &num / &den
}
