//! Encoder backend contract and the seedable toy backend.
//!
//! A backend maps images (flat `f64` buffers) and token sequences into one
//! shared embedding space, and exposes vector-Jacobian products for both
//! paths so losses can be differentiated through it without an autodiff
//! framework. Real encoders plug in behind the same trait.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vector::{dot, norm, EmbeddingVector};
use crate::error::{AirError, Result};

/// One token vector as fed to a text encoder, bypassing tokenization.
pub type Token = Vec<f64>;

pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Embedding dimension.
    fn dim(&self) -> usize;

    fn image_dim(&self) -> usize;

    fn token_dim(&self) -> usize;

    fn encode_image(&self, image: &[f64]) -> Result<Vec<f64>>;

    fn tokenize(&self, text: &str) -> Vec<Token>;

    fn encode_tokens(&self, tokens: &[Token]) -> Result<Vec<f64>>;

    /// `J_image(image)^T * cotangent`.
    fn image_vjp(&self, image: &[f64], cotangent: &[f64]) -> Result<Vec<f64>>;

    /// `J_tokens(tokens)^T * cotangent`, one gradient per token.
    fn tokens_vjp(&self, tokens: &[Token], cotangent: &[f64]) -> Result<Vec<Token>>;

    /// Flat view of the encoder weights, used to check they stay frozen.
    fn parameters(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Whether several workers may call the backend at once.
    fn is_reentrant(&self) -> bool {
        false
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        self.encode_tokens(&self.tokenize(text))
    }

    fn embed_images(&self, images: &[Vec<f64>]) -> Result<Vec<EmbeddingVector>> {
        images
            .iter()
            .map(|img| EmbeddingVector::from_f64(&self.encode_image(img)?))
            .collect()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        EmbeddingVector::from_f64(&self.encode_text(text)?)
    }
}

/// Lowercases, drops punctuation and template placeholders, splits on whitespace.
pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '-' || *c == '\'')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Twist of the text space about a center: a point at radius `r` is rotated
/// within the plane `(e1, e2)` by `rate * r` radians. Offsets pointing at the
/// center are therefore rotated by an angle proportional to their length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistWarp {
    pub center: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub rate: f64,
}

impl TwistWarp {
    fn plane_coords(&self, y: &[f64]) -> (f64, f64) {
        (dot(y, &self.e1), dot(y, &self.e2))
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let y: Vec<f64> = p.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let theta = self.rate * norm(&y);
        let (a, b) = self.plane_coords(&y);
        let (s, c) = theta.sin_cos();
        let da = a * c - b * s - a;
        let db = a * s + b * c - b;
        (0..p.len())
            .map(|k| self.center[k] + y[k] + da * self.e1[k] + db * self.e2[k])
            .collect()
    }

    /// `J(p)^T g`.
    pub fn vjp(&self, p: &[f64], g: &[f64]) -> Vec<f64> {
        let y: Vec<f64> = p.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let r = norm(&y);
        let theta = self.rate * r;
        let (s, c) = theta.sin_cos();
        // R^T g: rotate the in-plane part of g by -theta.
        let (ga, gb) = self.plane_coords(g);
        let ra = ga * c + gb * s - ga;
        let rb = -ga * s + gb * c - gb;
        let mut out: Vec<f64> = (0..g.len()).map(|k| g[k] + ra * self.e1[k] + rb * self.e2[k]).collect();
        if r > 1e-15 {
            let (a, b) = self.plane_coords(&y);
            // (dR/dtheta) y, in plane coordinates.
            let dya = -a * s - b * c;
            let dyb = a * c - b * s;
            let coeff = self.rate * (dya * ga + dyb * gb) / r;
            for (o, yk) in out.iter_mut().zip(&y) {
                *o += coeff * yk;
            }
        }
        out
    }
}

/// Two fixed linear maps into a shared space, with a hashed toy vocabulary.
///
/// `E_I(x) = W_I x` and `E_T(tokens) = warp(W_T mean(tokens))` where the warp
/// is the identity unless one is installed.
#[derive(Clone, Debug)]
pub struct ToyBackend {
    name: String,
    seed: u64,
    image_map: DMatrix<f64>,
    text_map: DMatrix<f64>,
    vocab: BTreeMap<String, Token>,
    warp: Option<TwistWarp>,
}

impl ToyBackend {
    /// Random Gaussian maps, entries `N(0, 1/cols)`.
    pub fn new(seed: u64, dim: usize, image_dim: usize, token_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_map = gaussian_matrix(&mut rng, dim, image_dim);
        let text_map = gaussian_matrix(&mut rng, dim, token_dim);
        Self {
            name: "toy".to_string(),
            seed,
            image_map,
            text_map,
            vocab: BTreeMap::new(),
            warp: None,
        }
    }

    /// Both maps are the identity on `R^dim`.
    pub fn identity(seed: u64, dim: usize) -> Self {
        Self {
            name: "toy-identity".to_string(),
            seed,
            image_map: DMatrix::identity(dim, dim),
            text_map: DMatrix::identity(dim, dim),
            vocab: BTreeMap::new(),
            warp: None,
        }
    }

    pub fn with_maps(seed: u64, image_map: DMatrix<f64>, text_map: DMatrix<f64>) -> Result<Self> {
        if image_map.nrows() != text_map.nrows() {
            return Err(AirError::DimMismatch {
                expected: image_map.nrows(),
                got: text_map.nrows(),
            });
        }
        Ok(Self {
            name: "toy".to_string(),
            seed,
            image_map,
            text_map,
            vocab: BTreeMap::new(),
            warp: None,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_warp(mut self, warp: TwistWarp) -> Self {
        self.warp = Some(warp);
        self
    }

    pub fn image_map(&self) -> &DMatrix<f64> {
        &self.image_map
    }

    pub fn text_map(&self) -> &DMatrix<f64> {
        &self.text_map
    }

    pub fn set_token(&mut self, word: &str, token: Token) -> Result<()> {
        if token.len() != self.token_dim() {
            return Err(AirError::DimMismatch {
                expected: self.token_dim(),
                got: token.len(),
            });
        }
        self.vocab.insert(word.to_lowercase(), token);
        Ok(())
    }

    /// Vocabulary entry, or a deterministic pseudo-random token for unseen words.
    pub fn token_for(&self, word: &str) -> Token {
        if let Some(t) = self.vocab.get(word) {
            return t.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(word.as_bytes()));
        (0..self.token_dim()).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Pre-warp text coordinate `W_T mean(tokens)`.
    pub fn text_linear(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        let first = tokens.first().ok_or(AirError::EmptySet)?;
        let mut mean = DVector::<f64>::zeros(self.token_dim());
        for tok in tokens {
            if tok.len() != self.token_dim() {
                return Err(AirError::DimMismatch {
                    expected: self.token_dim(),
                    got: tok.len(),
                });
            }
            mean += DVector::from_column_slice(tok);
        }
        debug_assert_eq!(first.len(), self.token_dim());
        mean /= tokens.len() as f64;
        Ok((&self.text_map * mean).as_slice().to_vec())
    }
}

impl EncoderBackend for ToyBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.image_map.nrows()
    }

    fn image_dim(&self) -> usize {
        self.image_map.ncols()
    }

    fn token_dim(&self) -> usize {
        self.text_map.ncols()
    }

    fn encode_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.image_dim() {
            return Err(AirError::DimMismatch {
                expected: self.image_dim(),
                got: image.len(),
            });
        }
        Ok((&self.image_map * DVector::from_column_slice(image))
            .as_slice()
            .to_vec())
    }

    fn tokenize(&self, text: &str) -> Vec<Token> {
        split_words(text).iter().map(|w| self.token_for(w)).collect()
    }

    fn encode_tokens(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        let lin = self.text_linear(tokens)?;
        Ok(match &self.warp {
            Some(w) => w.apply(&lin),
            None => lin,
        })
    }

    fn image_vjp(&self, image: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.image_dim() {
            return Err(AirError::DimMismatch {
                expected: self.image_dim(),
                got: image.len(),
            });
        }
        Ok((self.image_map.transpose() * DVector::from_column_slice(cotangent))
            .as_slice()
            .to_vec())
    }

    fn tokens_vjp(&self, tokens: &[Token], cotangent: &[f64]) -> Result<Vec<Token>> {
        let g = match &self.warp {
            Some(w) => w.vjp(&self.text_linear(tokens)?, cotangent),
            None => cotangent.to_vec(),
        };
        let per_token = (self.text_map.transpose() * DVector::from_vec(g)) / tokens.len() as f64;
        Ok(vec![per_token.as_slice().to_vec(); tokens.len()])
    }

    fn parameters(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.image_map.iter().copied().collect();
        p.extend(self.text_map.iter());
        if let Some(w) = &self.warp {
            p.extend(&w.center);
            p.extend(&w.e1);
            p.extend(&w.e2);
            p.push(w.rate);
        }
        p
    }

    fn is_reentrant(&self) -> bool {
        true
    }
}
