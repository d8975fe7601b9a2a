// SPDX-License-Identifier: MIT OR Apache-2.0

//! Latent-to-image generators.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::Image;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Name of the squared latent distance regularizer.
pub const LATENT_L2: &str = "latent_l2";

/// Differentiable map from a latent vector to an image.
pub trait Generator: Send + Sync {
    fn latent_dim(&self) -> usize;

    fn image_shape(&self) -> (usize, usize, usize);

    /// Standard normal latent drawn from `seed`.
    fn sample_latent(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.latent_dim()).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `latent` is `1 x latent_dim`; output is `channels x (height*width)`.
    fn generate_var(&self, graph: &Graph, latent: &Var) -> Result<Var>;

    fn generate(&self, latent: &[f64]) -> Result<Image> {
        let graph = Graph::new();
        let out = self.generate_var(&graph, &graph.row(latent))?;
        Image::from_var(&out, self.image_shape())
    }

    /// Named scalar loss terms keeping the edit close to its source.
    fn regularizers(&self, latent: &Var, reference_latent: &[f64], _reference_image: Option<&Image>) -> Vec<(String, Var)> {
        let reference = latent.graph().row(reference_latent);
        let diff = latent - &reference;
        vec![(LATENT_L2.to_string(), diff.square().sum())]
    }
}

/// Linear map followed by a sigmoid.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    weight: Array2<f64>,
    bias: Array2<f64>,
    shape: (usize, usize, usize),
}

impl ToyGenerator {
    pub fn new(latent_dim: usize, shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        let (c, h, w) = shape;
        let out = c * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (latent_dim as f64).sqrt()).expect("positive std");
        let weight = Array2::from_shape_simple_fn((latent_dim, out), || dist.sample(&mut rng));
        let bias = Array2::from_shape_simple_fn((1, out), || 0.2 * dist.sample(&mut rng));
        Ok(ToyGenerator { weight, bias, shape })
    }

    /// 16-dimensional latent, 3x16x16 output.
    pub fn with_seed(seed: u64) -> Self {
        Self::new(16, (3, 16, 16), seed).expect("valid default")
    }
}

impl Generator for ToyGenerator {
    fn latent_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn generate_var(&self, graph: &Graph, latent: &Var) -> Result<Var> {
        if latent.shape() != (1, self.latent_dim()) {
            return Err(Error::invalid(format!(
                "latent shape {:?}, expected (1, {})",
                latent.shape(),
                self.latent_dim()
            )));
        }
        let (c, h, w) = self.shape;
        let pre = &latent.matmul(&graph.leaf(self.weight.clone())) + &graph.leaf(self.bias.clone());
        Ok(pre.sigmoid().reshape((c, h * w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let g = ToyGenerator::with_seed(4);
        let z = g.sample_latent(1);
        let graph = Graph::new();
        let zv = graph.row(&z);
        let out = g.generate_var(&graph, &zv).unwrap().square().sum();
        let grad = graph.grad(&out, &[zv], false).unwrap()[0].value();
        let f = |z: &[f64]| g.generate(z).unwrap().0.mapv(|v| v * v).sum();
        for i in [0, 7, 15] {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let fd = (f(&a) - f(&b)) / 2e-5;
            assert!((fd - grad[[0, i]]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn regularizer_is_squared_distance() {
        let g = ToyGenerator::with_seed(0);
        let graph = Graph::new();
        let z = graph.row(&[1.0; 16]);
        let regs = g.regularizers(&z, &[0.0; 16], None);
        assert_eq!(regs[0].0, LATENT_L2);
        assert_eq!(regs[0].1.item(), 16.0);
    }

    #[test]
    fn output_in_unit_range_and_seeded() {
        let g = ToyGenerator::with_seed(0);
        let img = g.generate(&g.sample_latent(3)).unwrap();
        assert_eq!(img.shape(), (3, 16, 16));
        assert!(img.0.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(g.sample_latent(3), ToyGenerator::with_seed(9).sample_latent(3));
    }
}
