//! Coarse-to-fine trajectory selector.
//!
//! Observation tokens and vocabulary entries are embedded separately; a
//! cross-attention decoder scores every entry, the best `top_k` survive, and
//! a second decoder with self-attention re-scores the survivors layer by
//! layer. Training mixes the original scene, a randomly rotated copy and
//! soft targets from an EMA teacher.

mod checkpoint;
mod infer;
mod loss;
mod model;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use infer::{infer, Inference, Selector};
pub use loss::{
    imitation_targets, loss_coarse, loss_refine, make_soft_labels, shift_expert, stage_loss, target_table,
    topk_filter, SoftLabelSet, StageLoss, MAX_EXPERT_SHIFT,
};
pub use model::{trajectory_inputs, Graph, Planner, ScoreTable, Stage, StageOutputs};
pub use train::{train, train_item, ItemLosses, TrainLogRecord, TrainOptions, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DiffError;
use crate::evaluator::{EvalError, MetricVersion};
use crate::scenario::{TokenCaps, FOV_FIVE_CAMERA};
use crate::vocab::{GridSpec, VocabError};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint version {found}, expected {expected}")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Harness(String),
    #[error("empty training set")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    /// Score all entries, keep `top_k`, re-score with the refinement decoder.
    CoarseToFine,
    /// Select directly from the coarse scores; no refinement stage.
    SingleStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    Pretrained,
    Scratch,
}

/// Piecewise-linear EMA momentum as a function of training progress in epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub mode: EmaMode,
}

const RAMP_START: f64 = 0.992;
const RAMP_END: f64 = 0.996;
const HOLD: f64 = 0.998;
const RAMP_EPOCHS: f64 = 3.0;
const SCRATCH_WARMUP_EPOCHS: f64 = 3.0;

impl EmaSchedule {
    pub fn new(mode: EmaMode) -> Self {
        Self { mode }
    }

    /// Momentum after `progress` epochs (fractional). The ramp is closed on
    /// both ends, so it reaches its end value before switching to the hold.
    pub fn momentum(&self, progress: f64) -> f64 {
        let p = match self.mode {
            EmaMode::Pretrained => progress,
            EmaMode::Scratch => {
                if progress < SCRATCH_WARMUP_EPOCHS {
                    return 0.0;
                }
                progress - SCRATCH_WARMUP_EPOCHS
            }
        };
        if p <= RAMP_EPOCHS {
            let t = (p / RAMP_EPOCHS).clamp(0.0, 1.0);
            (1.0 - t) * RAMP_START + t * RAMP_END
        } else {
            HOLD
        }
    }

    /// Momentum in effect at the start of 1-based `epoch`.
    pub fn momentum_at_epoch(&self, epoch: usize) -> f64 {
        self.momentum(epoch.saturating_sub(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub hidden_dim: usize,
    pub attention_heads: usize,
    /// Feed-forward width as a multiple of `hidden_dim`.
    pub ffn_mult: usize,
    pub trans_dec_layers: usize,
    pub refine_dec_layers: usize,
    pub top_k: usize,
    pub coarse_self_attention: bool,
    pub refine_self_attention: bool,
    pub stage_mode: StageMode,
    /// Max rotation for augmentation, radians.
    pub rotation_max: f64,
    pub augmentation: bool,
    pub self_distillation: bool,
    /// Soft-label clip half-width.
    pub delta: f64,
    /// Imitation softmax temperature, m^2.
    pub imi_temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub ema_mode: EmaMode,
    /// Score combination used for filtering and selection.
    pub selection_version: MetricVersion,
    pub fov_halfangle: f64,
    pub token_caps: TokenCaps,
    pub vocab: GridSpec,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            attention_heads: 4,
            ffn_mult: 2,
            trans_dec_layers: 3,
            refine_dec_layers: 3,
            top_k: 256,
            coarse_self_attention: false,
            refine_self_attention: true,
            stage_mode: StageMode::CoarseToFine,
            rotation_max: std::f64::consts::FRAC_PI_6,
            augmentation: true,
            self_distillation: true,
            delta: 0.15,
            imi_temperature: 1.0,
            lr: 7.5e-5,
            batch_size: 4,
            epochs: 6,
            max_steps: None,
            ema_mode: EmaMode::Pretrained,
            selection_version: MetricVersion::V2,
            fov_halfangle: FOV_FIVE_CAMERA,
            token_caps: TokenCaps::default(),
            vocab: GridSpec::default(),
        }
    }
}

impl PlannerConfig {
    /// Small model on the compact vocabulary, sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 32,
            trans_dec_layers: 2,
            refine_dec_layers: 2,
            top_k: 64,
            lr: 2e-3,
            epochs: 1,
            vocab: GridSpec::compact(),
            ..Self::default()
        }
    }

    /// Filter width actually used: the whole vocabulary in single-stage mode.
    pub fn effective_top_k(&self) -> usize {
        match self.stage_mode {
            StageMode::CoarseToFine => self.top_k,
            StageMode::SingleStage => self.vocab.size,
        }
    }

    pub fn refine_enabled(&self) -> bool {
        self.stage_mode == StageMode::CoarseToFine && self.refine_dec_layers > 0
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::InvalidConfig(m.to_string()));
        self.vocab.validate().map_err(|e| PlannerError::InvalidConfig(e.to_string()))?;
        if self.hidden_dim == 0 || self.attention_heads == 0 || !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return bad("hidden_dim must be a positive multiple of attention_heads");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive");
        }
        if self.top_k == 0 || self.top_k > self.vocab.size {
            return bad("top_k must lie in 1..=vocabulary size");
        }
        if self.stage_mode == StageMode::CoarseToFine && self.refine_dec_layers == 0 {
            return bad("coarse-to-fine mode needs at least one refinement layer");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1]");
        }
        if self.imi_temperature.is_nan() || self.imi_temperature <= 0.0 {
            return bad("imi_temperature must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.rotation_max >= 0.0 && self.rotation_max <= std::f64::consts::PI) {
            return bad("rotation_max must lie in [0, pi]");
        }
        if !(self.fov_halfangle > 0.0 && self.fov_halfangle <= std::f64::consts::PI) {
            return bad("fov_halfangle must lie in (0, pi]");
        }
        Ok(())
    }
}
