use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};
use crate::prompt::{PromptLearnConfig, DEFAULT_INIT_TEXT, DEFAULT_PROMPT_TOKENS};

pub const DEFAULT_T_ADAPT: usize = 300;
pub const DEFAULT_LR: f64 = 0.002;
pub const DEFAULT_BATCH_SIZE: usize = 2;
pub const DEFAULT_PERTURB_SCALE: f64 = 1e-3;

/// How per-sample offset gradients of the directional losses are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetGradient {
    /// Gradient evaluated at the unit-normalized offset. Loss values are
    /// unchanged; the `1 / |offset|` growth near a fresh anchor is removed.
    #[default]
    Unit,
    /// Plain analytic gradient (perturbed offsets still use the unit form).
    Raw,
}

/// Hyperparameters of one adaptation run. Iteration counts are absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub t_adapt: usize,
    pub t_thresh: usize,
    pub t_int: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub source_text: String,
    pub target_text: String,
    pub baseline_mode: bool,
    /// Number of learnable context tokens per anchor prompt.
    #[serde(rename = "M")]
    pub m: usize,
    pub init_text: String,
    pub k_iter: usize,
    pub mu: f64,
    pub n_pairs: usize,
    /// Perturbation sigma as a multiple of the per-coordinate std of the image batch.
    pub perturb_scale: f64,
    #[serde(default)]
    pub offset_gradient: OffsetGradient,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self::with_t_adapt(DEFAULT_T_ADAPT)
    }
}

impl AdaptationConfig {
    /// Defaults with `t_thresh = 50%` and `t_int = 10%` of `t_adapt`.
    pub fn with_t_adapt(t_adapt: usize) -> Self {
        Self {
            t_adapt,
            t_thresh: fraction_of(t_adapt, 0.5),
            t_int: fraction_of(t_adapt, 0.1).max(1),
            eta: DEFAULT_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            source_text: "human".to_string(),
            target_text: "baby".to_string(),
            baseline_mode: false,
            m: DEFAULT_PROMPT_TOKENS,
            init_text: DEFAULT_INIT_TEXT.to_string(),
            k_iter: 200,
            mu: DEFAULT_LR,
            n_pairs: 1000,
            perturb_scale: DEFAULT_PERTURB_SCALE,
            offset_gradient: OffsetGradient::Unit,
        }
    }

    pub fn prompt_config(&self) -> PromptLearnConfig {
        PromptLearnConfig {
            k_iter: self.k_iter,
            lr: self.mu,
            n_pairs: self.n_pairs,
            optimizer: "adam".to_string(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_adapt == 0 {
            return Ok(());
        }
        if self.t_thresh >= self.t_adapt {
            return Err(AirError::config(
                "t_thresh",
                format!("must be < t_adapt ({}), got {}", self.t_adapt, self.t_thresh),
            ));
        }
        if self.t_int == 0 || self.t_int > self.t_adapt {
            return Err(AirError::config(
                "t_int",
                format!("must be in [1, {}], got {}", self.t_adapt, self.t_int),
            ));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(AirError::config("eta", "learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(AirError::config("batch_size", "must be >= 1"));
        }
        if self.m == 0 {
            return Err(AirError::config("M", "must be >= 1"));
        }
        if !(self.perturb_scale > 0.0 && self.perturb_scale.is_finite()) {
            return Err(AirError::config("perturb_scale", "must be positive"));
        }
        if self.source_text.trim().is_empty() {
            return Err(AirError::config("source_text", "empty"));
        }
        if self.target_text.trim().is_empty() {
            return Err(AirError::config("target_text", "empty"));
        }
        if !self.baseline_mode {
            let schedule = anchor_schedule(self)?;
            // The adaptive loss first fires at t_thresh + 1 and needs an anchor
            // sampled at or before that iteration.
            if let Some(&first) = schedule.anchors.first() {
                if first > self.t_thresh + 1 {
                    return Err(AirError::config(
                        "t_thresh",
                        format!(
                            "first anchor at t={first} comes after the adaptive loss starts (t={})",
                            self.t_thresh + 1
                        ),
                    ));
                }
            }
        }
        self.prompt_config().validate()
    }
}

pub(crate) fn fraction_of(total: usize, frac: f64) -> usize {
    (total as f64 * frac).round() as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub t_adapt: usize,
    pub t_thresh: usize,
    /// Iterations at which an anchor is sampled; `t = 0` is excluded.
    pub anchors: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Schedule {
    pub fn is_anchor(&self, t: usize) -> bool {
        self.anchors.binary_search(&t).is_ok()
    }

    /// The adaptive loss is active strictly after the threshold.
    pub fn adaptive_active(&self, t: usize) -> bool {
        t > self.t_thresh && t < self.t_adapt
    }
}

pub fn anchor_schedule(cfg: &AdaptationConfig) -> Result<Schedule> {
    if cfg.t_int == 0 {
        return Err(AirError::config("t_int", "must be >= 1"));
    }
    let anchors: Vec<usize> = (cfg.t_int..cfg.t_adapt).step_by(cfg.t_int).collect();
    let mut warnings = Vec::new();
    if anchors.is_empty() && cfg.t_adapt > 0 {
        warnings.push(
            AirError::config(
                "t_int",
                format!("t_int = {} leaves no anchor inside (0, {})", cfg.t_int, cfg.t_adapt),
            )
            .to_string(),
        );
    }
    Ok(Schedule {
        t_adapt: cfg.t_adapt,
        t_thresh: cfg.t_thresh,
        anchors,
        warnings,
    })
}
