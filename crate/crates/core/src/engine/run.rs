//! The iterative-refinement training loop.
//!
//! Every iteration computes the source-anchored directional loss over a batch
//! of latents. At scheduled iterations the trainable generator is frozen into
//! a new anchor and a prompt describing it is learned. After the threshold the
//! anchor-anchored adaptive loss is added with unit weight. Only generator
//! parameters are updated; encoders are borrowed immutably throughout.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{anchor_schedule, AdaptationConfig, OffsetGradient, Schedule};
use super::generator::{Generator, LatentCode};
use crate::embedding::{norm, split_words, sub, EncoderBackend, Token, ZERO_NORM_EPS};
use crate::error::{AirError, Result};
use crate::losses::{direction_loss, loss_gradient, DirectionLossValue, LossGradient, Wrt};
use crate::optim::Adam;
use crate::prompt::{init_prompt, interpolate_label, learn_anchor_prompt, save_prompt, PromptState};

const STREAM_PERTURB: u64 = 1 << 40;
const STREAM_PROMPT: u64 = 1 << 41;

pub const HISTORY_HEADER: [&str; 4] = ["t", "loss_direction", "loss_adaptive", "loss_total"];

/// Encoders and the frozen source generator shared by a run.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub encoder: &'a dyn EncoderBackend,
    pub source: &'a dyn Generator,
}

#[derive(Clone, Debug)]
pub struct AnchorState {
    pub index: usize,
    pub generator: Arc<dyn Generator>,
    pub t_i: usize,
    pub p_i: f64,
    pub prompt: PromptState,
    /// Alignment loss before and after prompt learning.
    pub align_loss: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub t: usize,
    pub loss_direction: f64,
    pub loss_adaptive: Option<f64>,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub t: usize,
    pub loss_direction: f64,
    pub loss_adaptive: Option<f64>,
    pub loss_total: f64,
    pub anchor_sampled: Option<usize>,
    pub anchor_skipped: bool,
    pub perturbed_direction: bool,
    pub perturbed_adaptive: bool,
}

#[derive(Debug)]
pub struct RunState {
    /// Next iteration to execute.
    pub t: usize,
    pub generator: Box<dyn Generator>,
    pub optimizer: Adam,
    pub anchors: Vec<AnchorState>,
    pub history: Vec<HistoryRow>,
    pub skipped_anchors: Vec<usize>,
    pub run_dir: Option<PathBuf>,
}

impl RunState {
    pub fn latest_anchor(&self) -> Option<&AnchorState> {
        self.anchors.last()
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma` elementwise.
pub fn perturb_output(images: &[Vec<f64>], sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigmas = vec![sigma; images.first().map_or(0, Vec::len)];
    perturb_with(images, &sigmas, &mut rng)
}

fn perturb_with(images: &[Vec<f64>], sigmas: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    images
        .iter()
        .map(|img| {
            img.iter()
                .zip(sigmas)
                .map(|(x, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    x + s * z
                })
                .collect()
        })
        .collect()
}

/// `scale` times the per-coordinate standard deviation of the batch. Constant
/// coordinates fall back to `scale` times the RMS of the batch (or `scale`).
fn perturbation_sigmas(images: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let n = images.len() as f64;
    let d = images[0].len();
    let rms = (images.iter().flatten().map(|x| x * x).sum::<f64>() / (n * d as f64)).sqrt();
    let fallback = if rms > 0.0 { scale * rms } else { scale };
    (0..d)
        .map(|k| {
            let mean = images.iter().map(|x| x[k]).sum::<f64>() / n;
            let var = images.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                scale * var.sqrt()
            } else {
                fallback
            }
        })
        .collect()
}

/// Label token of a description: the mean of its word tokens.
pub fn label_token(encoder: &dyn EncoderBackend, text: &str) -> Result<Token> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(AirError::BadInit(format!("description `{text}` has no tokens")));
    }
    let tokens = encoder.tokenize(&words.join(" "));
    let mut acc = vec![0.0; encoder.token_dim()];
    for t in &tokens {
        acc.iter_mut().zip(t).for_each(|(a, v)| *a += v);
    }
    let n = tokens.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Holds everything fixed for the duration of a run.
pub struct Trainer<'a> {
    cfg: AdaptationConfig,
    schedule: Schedule,
    backends: Backends<'a>,
    label_source: Token,
    label_target: Token,
    initial_prompt: PromptState,
    target_embedding: Vec<f64>,
    text_offset: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: AdaptationConfig, backends: Backends<'a>) -> Result<Self> {
        cfg.validate()?;
        let schedule = anchor_schedule(&cfg)?;
        let encoder = backends.encoder;
        let init_tokens = encoder.tokenize(&cfg.init_text);
        let label_source = label_token(encoder, &cfg.source_text)?;
        let label_target = label_token(encoder, &cfg.target_text)?;
        let initial_prompt = init_prompt(cfg.m, &init_tokens, label_source.clone())?.frozen();
        let target_prompt = init_prompt(cfg.m, &init_tokens, label_target.clone())?;
        let source_embedding = initial_prompt.encode(encoder)?;
        let target_embedding = target_prompt.encode(encoder)?;
        let text_offset = sub(&target_embedding, &source_embedding);
        let n = norm(&text_offset);
        if n < ZERO_NORM_EPS {
            return Err(AirError::ZeroNorm(n));
        }
        Ok(Self {
            cfg,
            schedule,
            backends,
            label_source,
            label_target,
            initial_prompt,
            target_embedding,
            text_offset,
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn labels(&self) -> (&[f64], &[f64]) {
        (&self.label_source, &self.label_target)
    }

    /// Frozen prompt standing in for the source generator.
    pub fn initial_prompt(&self) -> &PromptState {
        &self.initial_prompt
    }

    /// `E_T(T_T) - E_T(T_S)`.
    pub fn source_text_offset(&self) -> &[f64] {
        &self.text_offset
    }

    /// `E_T(T_T) - E_T(P_A)`.
    pub fn anchor_text_offset(&self, anchor: &AnchorState) -> Result<Vec<f64>> {
        Ok(sub(
            &self.target_embedding,
            &anchor.prompt.encode(self.backends.encoder)?,
        ))
    }

    pub fn progress(&self, t: usize) -> f64 {
        t as f64 / self.cfg.t_adapt as f64
    }

    pub fn initial_state(&self, run_dir: Option<&Path>) -> Result<RunState> {
        let generator = self.backends.source.boxed_clone();
        let optimizer = Adam::new(self.cfg.eta, generator.parameters().len());
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir.join("anchors"))?;
            fs::create_dir_all(dir.join("checkpoints"))?;
        }
        Ok(RunState {
            t: 0,
            generator,
            optimizer,
            anchors: Vec::new(),
            history: Vec::new(),
            skipped_anchors: Vec::new(),
            run_dir: run_dir.map(Path::to_path_buf),
        })
    }

    pub fn batch_latents(&self, t: usize) -> Vec<LatentCode> {
        let mut rng = stream_rng(self.cfg.seed, t as u64);
        self.backends.source.sample_latents(self.cfg.batch_size, &mut rng)
    }

    pub fn prompt_latents(&self, t_i: usize) -> Vec<LatentCode> {
        let mut rng = stream_rng(self.cfg.seed, STREAM_PROMPT + t_i as u64);
        self.backends.source.sample_latents(self.cfg.n_pairs, &mut rng)
    }

    /// Freezes the trainable generator as the next anchor and learns its prompt
    /// against the previous anchor (the source generator and the initial prompt
    /// for the first one).
    pub fn snapshot_anchor(&self, state: &RunState) -> Result<AnchorState> {
        let t_i = state.t;
        let index = state.anchors.len() + 1;
        let frozen = state.generator.snapshot();
        let p_i = self.progress(t_i);
        let label = interpolate_label(&self.label_source, &self.label_target, p_i)?;
        let (prev_gen, prev_prompt): (&dyn Generator, &PromptState) = match state.anchors.last() {
            Some(a) => (a.generator.as_ref(), &a.prompt),
            None => (self.backends.source, &self.initial_prompt),
        };
        let mut pcfg = self.cfg.prompt_config();
        pcfg.seed = self.cfg.seed ^ (STREAM_PROMPT + t_i as u64);
        let outcome = learn_anchor_prompt(
            prev_gen,
            frozen.as_ref(),
            prev_prompt,
            label,
            index,
            &pcfg,
            &self.prompt_latents(t_i),
            self.backends.encoder,
        )?;
        Ok(AnchorState {
            index,
            generator: frozen,
            t_i,
            p_i,
            prompt: outcome.prompt,
            align_loss: (outcome.initial_loss, outcome.final_loss),
        })
    }

    /// Loss and parameter gradient for one directional term. The trainable
    /// outputs are perturbed when any offset vanishes.
    fn branch(
        &self,
        generator: &dyn Generator,
        latents: &[LatentCode],
        reference: &[Vec<f64>],
        text_offset: &[f64],
        perturb_stream: u64,
    ) -> Result<(DirectionLossValue, Vec<f64>, bool)> {
        let encoder = self.backends.encoder;
        let mut images = latents
            .iter()
            .map(|w| generator.generate(w))
            .collect::<Result<Vec<_>>>()?;
        let mut embeddings = images
            .iter()
            .map(|x| encoder.encode_image(x))
            .collect::<Result<Vec<_>>>()?;
        let degenerate = embeddings
            .iter()
            .zip(reference)
            .any(|(e, r)| norm(&sub(e, r)) < ZERO_NORM_EPS);
        if degenerate {
            let sigmas = perturbation_sigmas(&images, self.cfg.perturb_scale);
            let mut rng = stream_rng(self.cfg.seed, perturb_stream);
            images = perturb_with(&images, &sigmas, &mut rng);
            embeddings = images
                .iter()
                .map(|x| encoder.encode_image(x))
                .collect::<Result<Vec<_>>>()?;
        }
        let offsets: Vec<Vec<f64>> = embeddings.iter().zip(reference).map(|(e, r)| sub(e, r)).collect();
        let loss = direction_loss(&offsets, text_offset)?;
        // The loss is scale-free in each offset, so its raw gradient grows as
        // the inverse offset length. Perturbed offsets are always tiny, and so
        // is the offset to an anchor right after it is sampled.
        let unit = degenerate || self.cfg.offset_gradient == OffsetGradient::Unit;
        let grad_at: Vec<Vec<f64>> = if unit {
            offsets
                .iter()
                .map(|u| {
                    let n = norm(u);
                    u.iter().map(|x| x / n).collect()
                })
                .collect()
        } else {
            offsets.clone()
        };
        let LossGradient::ImageOffsets(grads) = loss_gradient(&grad_at, text_offset, Wrt::ImageOffsets)? else {
            unreachable!("requested image-offset gradient")
        };
        let mut param_grad = vec![0.0; generator.parameters().len()];
        for ((w, img), g) in latents.iter().zip(&images).zip(&grads) {
            let g_img = encoder.image_vjp(img, g)?;
            let g_par = generator.param_vjp(w, &g_img)?;
            param_grad.iter_mut().zip(&g_par).for_each(|(a, b)| *a += b);
        }
        Ok((loss, param_grad, degenerate))
    }

    fn embed_outputs(&self, generator: &dyn Generator, latents: &[LatentCode]) -> Result<Vec<Vec<f64>>> {
        latents
            .iter()
            .map(|w| self.backends.encoder.encode_image(&generator.generate(w)?))
            .collect()
    }

    /// Executes iteration `state.t` and advances it.
    pub fn step(&self, state: &mut RunState) -> Result<StepReport> {
        let t = state.t;
        let mut anchor_sampled = None;
        let mut anchor_skipped = false;
        if !self.cfg.baseline_mode && self.schedule.is_anchor(t) {
            match self.snapshot_anchor(state) {
                Ok(anchor) => {
                    anchor_sampled = Some(anchor.index);
                    state.anchors.push(anchor);
                }
                Err(AirError::ZeroImageOffset(_)) => {
                    anchor_skipped = true;
                    state.skipped_anchors.push(t);
                }
                Err(e) => return Err(e),
            }
        }

        let latents = self.batch_latents(t);
        let source_emb = self.embed_outputs(self.backends.source, &latents)?;
        let (direction, mut grad, perturbed_direction) = self.branch(
            state.generator.as_ref(),
            &latents,
            &source_emb,
            &self.text_offset,
            STREAM_PERTURB + 2 * t as u64,
        )?;

        let mut adaptive = None;
        let mut perturbed_adaptive = false;
        if !self.cfg.baseline_mode && self.schedule.adaptive_active(t) {
            if let Some(anchor) = state.anchors.last() {
                let anchor_emb = self.embed_outputs(anchor.generator.as_ref(), &latents)?;
                let text_offset = self.anchor_text_offset(anchor)?;
                let (loss, g, perturbed) = self.branch(
                    state.generator.as_ref(),
                    &latents,
                    &anchor_emb,
                    &text_offset,
                    STREAM_PERTURB + 2 * t as u64 + 1,
                )?;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                perturbed_adaptive = perturbed;
                adaptive = Some(loss);
            }
        }

        let total = crate::losses::combined_loss(&direction, adaptive.as_ref());
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            if state.run_dir.is_some() {
                self.write_checkpoint(state)?;
            }
            return Err(AirError::NonFiniteLoss { t });
        }
        state.optimizer.step(state.generator.parameters_mut(), &grad);

        let row = HistoryRow {
            t,
            loss_direction: direction.value,
            loss_adaptive: adaptive.as_ref().map(|a| a.value),
            loss_total: total,
        };
        state.history.push(row.clone());
        state.t += 1;

        // Checkpoints follow the anchor schedule, also in baseline mode.
        if let (Some(dir), true) = (state.run_dir.clone(), self.schedule.is_anchor(t)) {
            if anchor_sampled.is_some() {
                self.persist_anchor(&dir, state.anchors.last().expect("just pushed"))?;
            }
            self.write_checkpoint(state)?;
        }
        Ok(StepReport {
            t,
            loss_direction: row.loss_direction,
            loss_adaptive: row.loss_adaptive,
            loss_total: row.loss_total,
            anchor_sampled,
            anchor_skipped,
            perturbed_direction,
            perturbed_adaptive,
        })
    }

    /// Runs the remaining iterations and writes the final checkpoint.
    pub fn run(&self, mut state: RunState) -> Result<RunState> {
        while state.t < self.cfg.t_adapt {
            self.step(&mut state)?;
        }
        if state.run_dir.is_some() {
            self.write_checkpoint(&state)?;
        }
        Ok(state)
    }

    fn persist_anchor(&self, dir: &Path, anchor: &AnchorState) -> Result<()> {
        let adir = dir.join("anchors").join(format!("anchor_{}", anchor.index));
        fs::create_dir_all(&adir)?;
        let bytes: Vec<u8> = anchor
            .generator
            .parameters()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        write_atomic(&adir.join("generator.bin"), &bytes)?;
        save_prompt(&adir, &anchor.prompt, anchor.t_i, anchor.p_i)
    }

    pub fn write_checkpoint(&self, state: &RunState) -> Result<PathBuf> {
        let dir = state
            .run_dir
            .as_ref()
            .ok_or_else(|| AirError::Checkpoint("run has no directory".into()))?;
        let ckpt = Checkpoint {
            t: state.t,
            config: self.cfg.clone(),
            generator_params: state.generator.parameters().to_vec(),
            optimizer: state.optimizer.clone(),
            anchors: state
                .anchors
                .iter()
                .map(|a| AnchorRecord {
                    index: a.index,
                    t_i: a.t_i,
                    p_i: a.p_i,
                    prompt: a.prompt.clone(),
                    align_loss: a.align_loss,
                    generator_params: a.generator.parameters().to_vec(),
                })
                .collect(),
            history: state.history.clone(),
            skipped_anchors: state.skipped_anchors.clone(),
        };
        let path = dir.join("checkpoints").join(format!("t_{:07}.json", state.t));
        fs::create_dir_all(dir.join("checkpoints"))?;
        write_atomic(&path, serde_json::to_string(&ckpt)?.as_bytes())?;
        write_history(&dir.join("history.csv"), &state.history)?;
        Ok(path)
    }

    /// Rebuilds the run state stored in a checkpoint file.
    pub fn resume(&self, checkpoint: &Path) -> Result<RunState> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(checkpoint)?)?;
        if ckpt.config != self.cfg {
            return Err(AirError::Checkpoint(format!(
                "{} was written with a different config",
                checkpoint.display()
            )));
        }
        let mut generator = self.backends.source.boxed_clone();
        generator.set_parameters(&ckpt.generator_params)?;
        let anchors = ckpt
            .anchors
            .into_iter()
            .map(|a| {
                let mut g = self.backends.source.boxed_clone();
                g.set_parameters(&a.generator_params)?;
                Ok(AnchorState {
                    index: a.index,
                    generator: Arc::from(g),
                    t_i: a.t_i,
                    p_i: a.p_i,
                    prompt: a.prompt,
                    align_loss: a.align_loss,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let run_dir = checkpoint.parent().and_then(Path::parent).map(Path::to_path_buf);
        Ok(RunState {
            t: ckpt.t,
            generator,
            optimizer: ckpt.optimizer,
            anchors,
            history: ckpt.history,
            skipped_anchors: ckpt.skipped_anchors,
            run_dir,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AnchorRecord {
    index: usize,
    t_i: usize,
    p_i: f64,
    prompt: PromptState,
    align_loss: (f64, f64),
    generator_params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    t: usize,
    config: AdaptationConfig,
    generator_params: Vec<f64>,
    optimizer: Adam,
    anchors: Vec<AnchorRecord>,
    history: Vec<HistoryRow>,
    skipped_anchors: Vec<usize>,
}

/// Checkpoint files of a run directory, sorted by iteration.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(run_dir.join("checkpoints"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn history_csv(history: &[HistoryRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(HISTORY_HEADER)?;
    for r in history {
        w.write_record([
            r.t.to_string(),
            r.loss_direction.to_string(),
            r.loss_adaptive.map(|v| v.to_string()).unwrap_or_default(),
            r.loss_total.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| AirError::Io(std::io::Error::other(e.to_string())))
}

pub fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    write_atomic(path, &history_csv(history)?)
}

/// Runs a full adaptation, persisting anchors and checkpoints when `run_dir` is given.
pub fn run_adaptation(cfg: &AdaptationConfig, backends: Backends<'_>, run_dir: Option<&Path>) -> Result<RunState> {
    let trainer = Trainer::new(cfg.clone(), backends)?;
    let state = trainer.initial_state(run_dir)?;
    trainer.run(state)
}

/// One iteration of the loop; see [`Trainer::step`].
pub fn adaptation_step(state: &mut RunState, trainer: &Trainer<'_>) -> Result<StepReport> {
    trainer.step(state)
}
