//! Generator plugin contract and the shipped toy generator.

use std::fmt::Debug;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::gaussian_matrix;
use crate::error::{AirError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A trainable image generator as seen by the adaptation loop.
///
/// Only the flat parameter view is touched by the loop; architectures stay
/// opaque. For adapter-based diffusion backends the parameters are the
/// adapter weights only.
pub trait Generator: Debug + Send + Sync {
    fn id(&self) -> &str;

    fn latent_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn generate(&self, w: &LatentCode) -> Result<Vec<f64>>;

    fn parameters(&self) -> &[f64];

    fn parameters_mut(&mut self) -> &mut [f64];

    /// Gradient w.r.t. the parameters of `cotangent . G(w)`.
    fn param_vjp(&self, w: &LatentCode, cotangent: &[f64]) -> Result<Vec<f64>>;

    /// Draws from the latent prior.
    fn sample_latents(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<LatentCode>;

    fn boxed_clone(&self) -> Box<dyn Generator>;

    /// Deep, immutable copy.
    fn snapshot(&self) -> Arc<dyn Generator> {
        Arc::from(self.boxed_clone())
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let dst = self.parameters_mut();
        if dst.len() != params.len() {
            return Err(AirError::ShapeMismatch(dst.len(), params.len()));
        }
        dst.copy_from_slice(params);
        Ok(())
    }
}

/// `G(w) = A w + b` with a standard-normal latent prior.
///
/// Parameters are laid out as `A` row-major followed by `b`. With
/// [`LinearGenerator::bias_only`] the trainable view is `b` alone and `A` is frozen,
/// in the spirit of adapter-only fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGenerator {
    id: String,
    latent_dim: usize,
    output_dim: usize,
    params: Vec<f64>,
    #[serde(default)]
    bias_only: bool,
}

impl LinearGenerator {
    pub fn new(id: impl Into<String>, weights: &[Vec<f64>], bias: &[f64]) -> Result<Self> {
        let output_dim = bias.len();
        if weights.len() != output_dim {
            return Err(AirError::ShapeMismatch(weights.len(), output_dim));
        }
        let latent_dim = weights.first().map_or(0, Vec::len);
        if latent_dim == 0 {
            return Err(AirError::EmptySet);
        }
        let mut params = Vec::with_capacity(output_dim * (latent_dim + 1));
        for row in weights {
            if row.len() != latent_dim {
                return Err(AirError::ShapeMismatch(row.len(), latent_dim));
            }
            params.extend_from_slice(row);
        }
        params.extend_from_slice(bias);
        Ok(Self {
            id: id.into(),
            latent_dim,
            output_dim,
            params,
            bias_only: false,
        })
    }

    /// Random weights with entries `N(0, spread^2 / latent_dim)` and the given bias.
    pub fn random(seed: u64, latent_dim: usize, bias: &[f64], spread: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian_matrix(&mut rng, bias.len(), latent_dim) * spread;
        let mut params: Vec<f64> = a.transpose().as_slice().to_vec();
        params.extend_from_slice(bias);
        Self {
            id: format!("linear-{seed}"),
            latent_dim,
            output_dim: bias.len(),
            params,
            bias_only: false,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn bias_only(mut self) -> Self {
        self.bias_only = true;
        self
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.weight_len()..]
    }

    /// All parameters, including frozen weights.
    pub fn all_parameters(&self) -> &[f64] {
        &self.params
    }

    fn weight_len(&self) -> usize {
        self.latent_dim * self.output_dim
    }

    fn trainable_start(&self) -> usize {
        if self.bias_only {
            self.weight_len()
        } else {
            0
        }
    }
}

impl Generator for LinearGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn generate(&self, w: &LatentCode) -> Result<Vec<f64>> {
        if w.dim() != self.latent_dim {
            return Err(AirError::DimMismatch {
                expected: self.latent_dim,
                got: w.dim(),
            });
        }
        let k = self.latent_dim;
        let bias = self.bias();
        Ok((0..self.output_dim)
            .map(|j| {
                let row = &self.params[j * k..(j + 1) * k];
                row.iter().zip(&w.0).map(|(a, x)| a * x).sum::<f64>() + bias[j]
            })
            .collect())
    }

    fn parameters(&self) -> &[f64] {
        &self.params[self.trainable_start()..]
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        let start = self.trainable_start();
        &mut self.params[start..]
    }

    fn param_vjp(&self, w: &LatentCode, cotangent: &[f64]) -> Result<Vec<f64>> {
        if cotangent.len() != self.output_dim {
            return Err(AirError::DimMismatch {
                expected: self.output_dim,
                got: cotangent.len(),
            });
        }
        let k = self.latent_dim;
        let mut g = vec![0.0; self.params.len()];
        for (j, cj) in cotangent.iter().enumerate() {
            for (l, wl) in w.0.iter().enumerate() {
                g[j * k + l] = cj * wl;
            }
            g[k * self.output_dim + j] = *cj;
        }
        Ok(g.split_off(self.trainable_start()))
    }

    /// Antithetic draws: each standard-normal code is followed by its negation,
    /// so the mean of any even-sized sample is exactly zero.
    fn sample_latents(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<LatentCode> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let w: Vec<f64> = (0..self.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
            let neg = w.iter().map(|x| -x).collect();
            out.push(LatentCode(w));
            if out.len() < n {
                out.push(LatentCode(neg));
            }
        }
        out
    }

    fn boxed_clone(&self) -> Box<dyn Generator> {
        Box::new(self.clone())
    }
}
