//! Generator adaptation with iterative anchor refinement.

mod config;
mod generator;
mod interp;
mod run;

pub use config::{
    anchor_schedule, AdaptationConfig, OffsetGradient, Schedule, DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_PERTURB_SCALE,
    DEFAULT_T_ADAPT,
};
pub use generator::{Generator, LatentCode, LinearGenerator};
pub use interp::{interpolate_latents, interpolate_weights};
pub use run::{
    adaptation_step, history_csv, label_token, list_checkpoints, perturb_output, run_adaptation, write_history,
    AnchorState, Backends, HistoryRow, RunState, StepReport, Trainer, HISTORY_HEADER,
};
