//! A small synthetic world with a controlled text/image offset misalignment.
//!
//! Images live in `R^dim` and the image encoder is the identity. The source
//! generator is centered at the origin; the true target domain is the same
//! generator shifted by `D = distance * e1`. The text encoder is linear in the
//! mean token followed by a twist about `D`, so a description whose pre-warp
//! coordinate is `p * D` embeds at `D - R((1 - p) * angle) (1 - p) D`. The
//! source-to-target text offset is therefore rotated by `angle` away from the
//! true image offset, and offsets from descriptions nearer the target are
//! rotated proportionally less.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{cosine_distance, mean_rows, split_words, sub, EncoderBackend, ToyBackend, TwistWarp};
use crate::engine::{AdaptationConfig, Generator, LinearGenerator};
use crate::error::{AirError, Result};
use crate::prompt::{init_prompt, DEFAULT_INIT_TEXT, DEFAULT_PROMPT_TOKENS};

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub dim: usize,
    pub latent_dim: usize,
    /// Length of the true image offset.
    pub distance: f64,
    /// Angle in degrees between the source text offset and the true image offset.
    pub angle_deg: f64,
    /// Per-coordinate standard deviation of generated images.
    pub spread: f64,
    /// Scale of the token-to-text map.
    pub text_scale: f64,
    pub source_text: String,
    pub target_text: String,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 8,
            latent_dim: 8,
            distance: 1.0,
            angle_deg: 40.0,
            spread: 0.5,
            text_scale: 0.02,
            source_text: "human".into(),
            target_text: "baby".into(),
        }
    }
}

pub struct World {
    pub config: WorldConfig,
    pub encoder: ToyBackend,
    pub source: LinearGenerator,
    /// Generator of real target-domain images.
    pub target: LinearGenerator,
    /// True image offset between the domain means.
    pub true_offset: Vec<f64>,
}

impl World {
    pub fn build(config: WorldConfig) -> Result<Self> {
        let d = config.dim;
        if d < 2 {
            return Err(AirError::config("dim", "needs at least two dimensions"));
        }
        if !(config.distance > 0.0 && config.spread > 0.0 && config.text_scale > 0.0) {
            return Err(AirError::config(
                "distance",
                "distance, spread and text_scale must be positive",
            ));
        }
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        let mut e2 = vec![0.0; d];
        e2[1] = 1.0;
        let true_offset: Vec<f64> = e1.iter().map(|x| x * config.distance).collect();
        let warp = TwistWarp {
            center: true_offset.clone(),
            e1,
            e2,
            rate: config.angle_deg.to_radians() / config.distance,
        };
        let text_map = DMatrix::identity(d, d) * config.text_scale;
        let mut encoder = ToyBackend::with_maps(config.seed, DMatrix::identity(d, d), text_map)?
            .with_name("toy-twist")
            .with_warp(warp);

        // Pick label tokens so that the full initial prompts sit at pre-warp
        // coordinates 0 and D.
        let n = (DEFAULT_PROMPT_TOKENS + 1) as f64;
        let ctx = init_prompt(
            DEFAULT_PROMPT_TOKENS,
            &encoder.tokenize(DEFAULT_INIT_TEXT),
            vec![0.0; d],
        )?;
        let mut ctx_sum = vec![0.0; d];
        for t in &ctx.tokens {
            ctx_sum.iter_mut().zip(t).for_each(|(a, b)| *a += b);
        }
        for (text, anchor) in [
            (&config.source_text, vec![0.0; d]),
            (&config.target_text, true_offset.clone()),
        ] {
            let words = split_words(text);
            if words.len() != 1 || split_words(DEFAULT_INIT_TEXT).contains(&words[0]) {
                return Err(AirError::config(
                    "source_text",
                    "world descriptions must be single words outside the init text",
                ));
            }
            let label: Vec<f64> = anchor
                .iter()
                .zip(&ctx_sum)
                .map(|(a, c)| n * a / config.text_scale - c)
                .collect();
            encoder.set_token(&words[0], label)?;
        }

        let source =
            LinearGenerator::random(config.seed, config.latent_dim, &vec![0.0; d], config.spread).with_id("source");
        let mut target = source.clone().with_id("target");
        let k = target.parameters().len() - d;
        for (b, o) in target.parameters_mut()[k..].iter_mut().zip(&true_offset) {
            *b += o;
        }
        Ok(Self {
            config,
            encoder,
            source,
            target,
            true_offset,
        })
    }

    /// Default adaptation settings for this world.
    pub fn adaptation_config(&self, t_adapt: usize) -> AdaptationConfig {
        AdaptationConfig {
            seed: self.config.seed,
            source_text: self.config.source_text.clone(),
            target_text: self.config.target_text.clone(),
            ..AdaptationConfig::with_t_adapt(t_adapt)
        }
    }

    /// `n` images from `generator` on a fixed latent stream.
    pub fn generate_samples(&self, generator: &dyn Generator, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generator
            .sample_latents(n, &mut rng)
            .iter()
            .map(|w| generator.generate(w))
            .collect()
    }

    /// Embeddings of [`World::generate_samples`].
    pub fn embed_samples(&self, generator: &dyn Generator, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.generate_samples(generator, n, seed)?
            .iter()
            .map(|x| self.encoder.encode_image(x))
            .collect()
    }

    /// Cosine distance between the mean embedding of `generator` and of the target domain.
    pub fn distance_to_target(&self, generator: &dyn Generator, n: usize, seed: u64) -> Result<f64> {
        let gen = mean_rows(&self.embed_samples(generator, n, seed)?)?;
        let real = mean_rows(&self.embed_samples(&self.target, n, seed ^ 0x9e37_79b9)?)?;
        cosine_distance(&gen, &real)
    }

    /// Angle in degrees between a text offset and the true image offset.
    pub fn angle_to_truth(&self, text_offset: &[f64]) -> Result<f64> {
        let c = 1.0 - cosine_distance(text_offset, &self.true_offset)?;
        Ok(c.clamp(-1.0, 1.0).acos().to_degrees())
    }

    pub fn text_offset(&self, from: &[f64], to: &[f64]) -> Vec<f64> {
        sub(to, from)
    }
}
