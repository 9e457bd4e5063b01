//! Anchor prompts: `M` learnable token vectors followed by one label token.
//!
//! The label of anchor `i` is pinned to an interpolation between the source and
//! target label tokens, weighted by training progress. Only the `M` context
//! tokens are optimized, by aligning the text offset between consecutive
//! anchor prompts with the image offset between consecutive anchor generators.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{mean_rows, norm, sub, EncoderBackend, OffsetVector, Token, ZERO_NORM_EPS};
use crate::engine::{Generator, LatentCode};
use crate::error::{AirError, Result};
use crate::losses::{direction_loss, loss_gradient, LossGradient, Wrt};
use crate::optim::Adam;

pub const DEFAULT_PROMPT_TOKENS: usize = 4;
pub const DEFAULT_INIT_TEXT: &str = "A photo of a";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub tokens: Vec<Token>,
    pub label: Token,
    pub anchor_index: usize,
    pub frozen: bool,
}

impl PromptState {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_dim(&self) -> usize {
        self.label.len()
    }

    /// Token sequence fed to the text encoder, label last.
    pub fn sequence(&self) -> Vec<Token> {
        let mut seq = self.tokens.clone();
        seq.push(self.label.clone());
        seq
    }

    pub fn encode(&self, encoder: &dyn EncoderBackend) -> Result<Vec<f64>> {
        encoder.encode_tokens(&self.sequence())
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptLearnConfig {
    pub k_iter: usize,
    pub lr: f64,
    pub n_pairs: usize,
    pub optimizer: String,
    pub seed: u64,
}

impl Default for PromptLearnConfig {
    fn default() -> Self {
        Self {
            k_iter: 200,
            lr: 0.002,
            n_pairs: 1000,
            optimizer: "adam".to_string(),
            seed: 0,
        }
    }
}

impl PromptLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_iter == 0 {
            return Err(AirError::config("k_iter", "must be >= 1"));
        }
        if self.n_pairs == 0 {
            return Err(AirError::config("n_pairs", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AirError::config("mu", "learning rate must be positive"));
        }
        if self.optimizer != "adam" {
            return Err(AirError::config(
                "optimizer",
                format!("unsupported optimizer `{}`", self.optimizer),
            ));
        }
        Ok(())
    }
}

/// Builds a prompt from initialization token vectors. Shorter inits repeat
/// their last token, longer ones are truncated.
pub fn init_prompt(m: usize, init_tokens: &[Token], label: Token) -> Result<PromptState> {
    if m == 0 {
        return Err(AirError::BadInit("M must be >= 1".into()));
    }
    let last = init_tokens
        .last()
        .ok_or_else(|| AirError::BadInit("initialization text has no tokens".into()))?;
    let d = label.len();
    if let Some(bad) = init_tokens.iter().find(|t| t.len() != d) {
        return Err(AirError::BadInit(format!(
            "token dim {} does not match label dim {d}",
            bad.len()
        )));
    }
    let tokens = (0..m).map(|j| init_tokens.get(j).unwrap_or(last).clone()).collect();
    Ok(PromptState {
        tokens,
        label,
        anchor_index: 0,
        frozen: false,
    })
}

/// `Y = (1 - p) Y_S + p Y_T`.
pub fn interpolate_label(y_source: &[f64], y_target: &[f64], p: f64) -> Result<Token> {
    if y_source.len() != y_target.len() {
        return Err(AirError::DimMismatch {
            expected: y_source.len(),
            got: y_target.len(),
        });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(AirError::RangeError {
            name: "p",
            value: p,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(y_source
        .iter()
        .zip(y_target)
        .map(|(s, t)| (1.0 - p) * s + p * t)
        .collect())
}

/// `E_T(P_cur) - E_T(P_prev)`.
pub fn prompt_offset(prev: &PromptState, cur: &PromptState, encoder: &dyn EncoderBackend) -> Result<Vec<f64>> {
    Ok(sub(&cur.encode(encoder)?, &prev.encode(encoder)?))
}

pub fn prompt_offset_vector(
    prev: &PromptState,
    cur: &PromptState,
    encoder: &dyn EncoderBackend,
) -> Result<OffsetVector> {
    let v = prompt_offset(prev, cur, encoder)?;
    Ok(OffsetVector::from_values(
        v.iter().map(|&x| x as f32).collect(),
        format!("P_A{}", prev.anchor_index),
        format!("P_A{}", cur.anchor_index),
    ))
}

/// Mean image embedding of `generator` over `latents`.
pub fn mean_image_embedding(
    generator: &dyn Generator,
    latents: &[LatentCode],
    encoder: &dyn EncoderBackend,
) -> Result<Vec<f64>> {
    let rows = latents
        .iter()
        .map(|w| encoder.encode_image(&generator.generate(w)?))
        .collect::<Result<Vec<_>>>()?;
    mean_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptLearnOutcome {
    pub prompt: PromptState,
    pub image_offset: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Learns the prompt of the current anchor.
///
/// The image offset between the two anchor generators is measured once over
/// the shared `latents`; then the context tokens (initialized from
/// `prev_prompt`) are optimized for `k_iter` steps while `label` stays fixed.
#[allow(clippy::too_many_arguments)]
pub fn learn_anchor_prompt(
    prev_generator: &dyn Generator,
    cur_generator: &dyn Generator,
    prev_prompt: &PromptState,
    label: Token,
    anchor_index: usize,
    cfg: &PromptLearnConfig,
    latents: &[LatentCode],
    encoder: &dyn EncoderBackend,
) -> Result<PromptLearnOutcome> {
    cfg.validate()?;
    if label.len() != prev_prompt.token_dim() {
        return Err(AirError::BadInit(format!(
            "label dim {} does not match prompt token dim {}",
            label.len(),
            prev_prompt.token_dim()
        )));
    }
    let image_offset = sub(
        &mean_image_embedding(cur_generator, latents, encoder)?,
        &mean_image_embedding(prev_generator, latents, encoder)?,
    );
    let n = norm(&image_offset);
    if n < ZERO_NORM_EPS {
        return Err(AirError::ZeroImageOffset(n));
    }

    let prev_embedding = prev_prompt.encode(encoder)?;
    let mut prompt = PromptState {
        tokens: prev_prompt.tokens.clone(),
        label,
        anchor_index,
        frozen: false,
    };
    let m = prompt.n_tokens();
    let d = prompt.token_dim();

    if norm(&sub(&prompt.encode(encoder)?, &prev_embedding)) < ZERO_NORM_EPS {
        // Same label as the previous anchor: nudge the context tokens so the
        // prompt offset is defined.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noise = Normal::new(0.0, 1e-6).expect("valid sigma");
        for t in prompt.tokens.iter_mut() {
            t.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
    }

    let align_loss = |p: &PromptState| -> Result<(f64, Vec<f64>)> {
        let delta = sub(&p.encode(encoder)?, &prev_embedding);
        let loss = direction_loss(std::slice::from_ref(&delta), &image_offset)?.value;
        Ok((loss, delta))
    };

    let mut flat: Vec<f64> = prompt.tokens.concat();
    let mut opt = Adam::new(cfg.lr, flat.len());
    let (initial_loss, _) = align_loss(&prompt)?;
    let fixed_label = prompt.label.clone();
    for _ in 0..cfg.k_iter {
        let (_, delta) = align_loss(&prompt)?;
        let LossGradient::ImageOffsets(g) =
            loss_gradient(std::slice::from_ref(&delta), &image_offset, Wrt::ImageOffsets)?
        else {
            unreachable!("requested image-offset gradient")
        };
        let token_grads = encoder.tokens_vjp(&prompt.sequence(), &g[0])?;
        let grad: Vec<f64> = token_grads[..m].concat();
        opt.step(&mut flat, &grad);
        for (j, tok) in prompt.tokens.iter_mut().enumerate() {
            tok.copy_from_slice(&flat[j * d..(j + 1) * d]);
        }
        debug_assert_eq!(prompt.label, fixed_label);
    }
    let (final_loss, _) = align_loss(&prompt)?;
    Ok(PromptLearnOutcome {
        prompt: prompt.frozen(),
        image_offset,
        initial_loss,
        final_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub anchor_index: usize,
    pub t_i: usize,
    pub p_i: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub d: usize,
}

/// Writes `prompt.bin` (float32 LE, `(M + 1) x d`, label last) and `prompt.json`.
pub fn save_prompt(dir: &Path, prompt: &PromptState, t_i: usize, p_i: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    for tok in prompt.sequence() {
        for v in tok {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(dir.join("prompt.bin"), buf)?;
    let meta = PromptMeta {
        anchor_index: prompt.anchor_index,
        t_i,
        p_i,
        m: prompt.n_tokens(),
        d: prompt.token_dim(),
    };
    fs::write(dir.join("prompt.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_prompt(dir: &Path) -> Result<(PromptState, PromptMeta)> {
    let meta: PromptMeta = serde_json::from_str(&fs::read_to_string(dir.join("prompt.json"))?)?;
    let bytes = fs::read(dir.join("prompt.bin"))?;
    let expected = (meta.m + 1) * meta.d * 4;
    if bytes.len() != expected {
        return Err(AirError::TruncatedFile {
            path: dir.join("prompt.bin"),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut seq: Vec<Token> = vals.chunks(meta.d).map(<[f64]>::to_vec).collect();
    let label = seq.pop().expect("M + 1 >= 1 rows");
    Ok((
        PromptState {
            tokens: seq,
            label,
            anchor_index: meta.anchor_index,
            frozen: true,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ToyBackend;

    #[test]
    fn init_with_four_tokens_and_label() {
        let b = ToyBackend::new(1, 4, 4, 4);
        let init = b.tokenize(DEFAULT_INIT_TEXT);
        assert_eq!(init.len(), 4);
        let y = b.token_for("human");
        let p = init_prompt(4, &init, y.clone()).unwrap();
        assert_eq!(p.sequence().len(), 5);
        assert_eq!(p.tokens, init);
        assert_eq!(p.sequence()[4], y);
    }

    #[test]
    fn init_pads_and_truncates() {
        let t = |x: f64| vec![x, x];
        let p = init_prompt(1, &[t(1.0)], t(9.0)).unwrap();
        assert_eq!(p.tokens, vec![t(1.0)]);
        let p = init_prompt(3, &[t(1.0), t(2.0)], t(9.0)).unwrap();
        assert_eq!(p.tokens, vec![t(1.0), t(2.0), t(2.0)]);
        let p = init_prompt(1, &[t(1.0), t(2.0)], t(9.0)).unwrap();
        assert_eq!(p.tokens, vec![t(1.0)]);
        assert!(matches!(
            init_prompt(2, &[t(1.0)], vec![0.0; 3]),
            Err(AirError::BadInit(_))
        ));
        assert!(matches!(init_prompt(2, &[], t(0.0)), Err(AirError::BadInit(_))));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let s = [1.0, 0.0];
        let t = [0.0, 1.0];
        assert_eq!(interpolate_label(&s, &t, 0.0).unwrap(), s.to_vec());
        assert_eq!(interpolate_label(&s, &t, 1.0).unwrap(), t.to_vec());
        assert_eq!(interpolate_label(&s, &t, 0.5).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            interpolate_label(&s, &t, 1.5),
            Err(AirError::RangeError { .. })
        ));
        assert!(matches!(
            interpolate_label(&s, &[1.0], 0.5),
            Err(AirError::DimMismatch { .. })
        ));
    }

    #[test]
    fn prompt_offset_properties() {
        let b = ToyBackend::identity(0, 3);
        let p = init_prompt(2, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], vec![0.0, 0.0, 1.0]).unwrap();
        assert!(norm(&prompt_offset(&p, &p, &b).unwrap()) == 0.0);
        let mut q = p.clone();
        let delta = [0.3, -0.6, 0.9];
        q.tokens[1].iter_mut().zip(delta).for_each(|(x, d)| *x += d);
        // Identity text map averages 3 tokens.
        let off = prompt_offset(&p, &q, &b).unwrap();
        for (o, d) in off.iter().zip(delta) {
            assert!((o - d / 3.0).abs() < 1e-15);
        }
        let back = prompt_offset(&q, &p, &b).unwrap();
        assert!(off.iter().zip(&back).all(|(a, b)| *a == -b));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_prompt(2, &[vec![0.5, 0.25], vec![1.0, -1.0]], vec![2.0, 3.0]).unwrap();
        save_prompt(dir.path(), &p, 20, 0.1).unwrap();
        let (q, meta) = load_prompt(dir.path()).unwrap();
        assert_eq!(q.tokens, p.tokens);
        assert_eq!(q.label, p.label);
        assert_eq!((meta.m, meta.d, meta.t_i), (2, 2, 20));
    }
}
