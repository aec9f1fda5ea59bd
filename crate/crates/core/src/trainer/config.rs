//! Run configuration: user-facing config files and their resolved form.
//!
//! Files are TOML (or JSON, chosen by extension) mirroring the field names
//! below. Precedence is flags > config file > defaults; the defaults are the
//! reference settings (learning rate 5e-4, gamma 1000, 10 latents, batch 64).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capacity_schedule::CapacitySchedule;
use crate::objectives::{ObjectiveConfig, ObjectiveMode};
use crate::synthdata::{Dataset, RendererKind};
use crate::vae_model::{Architecture, ModelConfig};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Encoder + decoder trained on images alone.
    Vae,
    /// Ground-truth factor channels + decoder.
    Generator,
}

pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;
pub const DEFAULT_GAMMA: f64 = 1000.0;
pub const DEFAULT_BATCH: usize = 64;
pub const DEFAULT_LOG_EVERY: u64 = 100;

fn default_batch() -> usize {
    DEFAULT_BATCH
}

fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}

fn default_log_every() -> u64 {
    DEFAULT_LOG_EVERY
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Defaults to dense for blob datasets, conv for sprite datasets.
    pub arch: Option<Architecture>,
    pub n_latents: Option<usize>,
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub mode: Option<ObjectiveMode>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub c_start: Option<f64>,
    pub c_end: Option<f64>,
    pub ramp_iters: Option<u64>,
}

/// User-facing run configuration, as read from a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub experiment: Experiment,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub iterations: Option<u64>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("cannot read config {path:?}: {e}")))?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        if is_json {
            serde_json::from_str(&text)
                .map_err(|e| TrainError::Config(format!("config {path:?}: {e}")))
        } else {
            toml::from_str(&text)
                .map_err(|e| TrainError::Config(format!("config {path:?}: {e}")))
        }
    }
}

/// Fully concrete run settings, derived from a [`TrainConfig`] plus the
/// dataset header; written verbatim next to the run outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub experiment: Experiment,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub schedule: Option<CapacitySchedule>,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl ResolvedConfig {
    /// Applies experiment and dataset dependent defaults.
    pub fn resolve(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self, TrainError> {
        let is_blob = dataset.renderer == RendererKind::Blob;
        let arch = cfg.model.arch.unwrap_or(if is_blob {
            Architecture::Dense
        } else {
            Architecture::Conv
        });
        let model = ModelConfig {
            arch,
            n_latents: cfg.model.n_latents.unwrap_or(10),
            channels: dataset.channels,
            height: dataset.height,
            width: dataset.width,
            hidden: cfg.model.hidden.clone().unwrap_or_else(|| vec![256, 256]),
        };
        model.validate().map_err(|e| TrainError::Config(e.to_string()))?;

        let mode = cfg.objective.mode.unwrap_or(match cfg.experiment {
            Experiment::Vae => ObjectiveMode::Elbo,
            Experiment::Generator => ObjectiveMode::Capacity,
        });
        let objective = ObjectiveConfig {
            mode,
            beta: cfg.objective.beta.unwrap_or(1.0),
            gamma: cfg.objective.gamma.unwrap_or(DEFAULT_GAMMA),
        };
        objective
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;

        let iterations = cfg.iterations.unwrap_or(match cfg.experiment {
            Experiment::Generator => 100_000,
            Experiment::Vae if is_blob => 30_000,
            Experiment::Vae => 60_000,
        });
        if iterations == 0 {
            return Err(TrainError::Config("iterations must be positive".into()));
        }

        let needs_schedule = matches!(mode, ObjectiveMode::Capacity);
        let schedule = if needs_schedule {
            let c_start = cfg.schedule.c_start.unwrap_or(match cfg.experiment {
                Experiment::Generator => 0.5,
                Experiment::Vae => 0.0,
            });
            let c_end = cfg.schedule.c_end.unwrap_or(25.0);
            let ramp = cfg.schedule.ramp_iters.unwrap_or(match cfg.experiment {
                Experiment::Generator => 100_000,
                Experiment::Vae => 30_000,
            });
            Some(
                CapacitySchedule::new(c_start, c_end, ramp)
                    .map_err(|e| TrainError::Config(e.to_string()))?,
            )
        } else {
            None
        };

        if cfg.batch_size == 0 || cfg.batch_size > dataset.len() {
            return Err(TrainError::Config(format!(
                "batch size {} must be in 1..={}",
                cfg.batch_size,
                dataset.len()
            )));
        }
        if cfg.log_every == 0 {
            return Err(TrainError::Config("log_every must be positive".into()));
        }
        let checkpoint_every = match cfg.checkpoint_every {
            Some(0) => return Err(TrainError::Config("checkpoint_every must be positive".into())),
            Some(k) => k,
            None => iterations,
        };
        if !cfg.learning_rate.is_finite() || cfg.learning_rate <= 0.0 {
            return Err(TrainError::Config(format!(
                "learning rate {} must be positive",
                cfg.learning_rate
            )));
        }

        Ok(ResolvedConfig {
            experiment: cfg.experiment,
            dataset: cfg.dataset.clone(),
            out_dir: cfg.out_dir.clone(),
            model,
            objective,
            schedule,
            batch_size: cfg.batch_size,
            iterations,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            log_every: cfg.log_every,
            checkpoint_every,
        })
    }

    pub fn capacity_at(&self, iteration: u64) -> f64 {
        self.schedule.map_or(0.0, |s| s.capacity_at(iteration))
    }
}
