//! Two-phase training and evaluation.
//!
//! Phase A trains backbone, mask decoder and guidance table without
//! pruning. Phase B freezes the backbone and trains the prune decoder, mask
//! decoder and guidance table with the schedule active.

mod adam;
mod eval;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{cost_config, evaluate, predict, EvalReport, Prediction};
pub use train::{train, train_on, EpochMetrics, TrainOutcome};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{ParamStore, Trainable};
use crate::prune::PruneSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(alias = "a")]
    A,
    #[serde(alias = "b")]
    B,
}

impl Phase {
    pub fn trainable(self) -> Trainable {
        let prefixes: &[&str] = match self {
            Phase::A => &["vit.", "mdec.", "guide."],
            Phase::B => &["prune.", "mdec.", "guide."],
        };
        Trainable::Prefixes(prefixes.iter().map(|s| s.to_string()).collect())
    }
}

/// A training run, read from JSON. Paths are relative to the working
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// Pruning schedule trained in phase B; phase A always runs unpruned.
    #[serde(default)]
    pub schedule: PruneSchedule,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub phase: Phase,
    pub seed: u64,
    pub train_data: PathBuf,
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    /// Phase A checkpoint to start phase B from.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Output checkpoint; its sidecar is written next to it with a `.json`
    /// suffix appended.
    pub checkpoint: PathBuf,
    /// Optional JSON-lines metrics file.
    #[serde(default)]
    pub metrics: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate(self.model.vit.num_layers)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.optimizer.lr)));
        }
        if self.phase == Phase::B && self.init_checkpoint.is_none() {
            return Err(Error::Config("phase B needs init_checkpoint (a phase A checkpoint)".into()));
        }
        Ok(())
    }

    /// The schedule actually trained in this phase.
    pub fn effective_schedule(&self) -> PruneSchedule {
        match self.phase {
            Phase::A => PruneSchedule {
                alpha: self.schedule.alpha,
                ..PruneSchedule::empty()
            },
            Phase::B => self.schedule.clone(),
        }
    }
}

/// Contents of a checkpoint's `.json` sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub model: ModelConfig,
    pub schedule: PruneSchedule,
    pub seed: u64,
    pub epochs: usize,
    /// Eval-set mIoU without pruning.
    pub eval_miou: Option<f64>,
    /// Eval-set mIoU under `schedule` (phase B).
    pub eval_miou_scheduled: Option<f64>,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    params.save(path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

/// Loads parameters and sidecar and checks that every parameter the model
/// needs is present with the right shape.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let params = ParamStore::load(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    params.check(&meta.model.param_specs())?;
    Ok((params, meta))
}
