//! Dataset ingestion, the parameter sweep, timing and report emission.

mod dataset;
mod sweep;
mod timing;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dataset::{
    degrade_dataset, list_pngs, measure, OperatorParams, Pair, PairEntry, PairMeta, PairSet,
    SkippedFile, META_FILE,
};
pub use sweep::{
    format_number, monotonicity_report, read_manifest, render_csv, render_markdown, replay_cell,
    run_sweep, CellRecord, ImageFailure, ImageSeeds, Manifest, MonotoneCheck, ResultRow,
    RunOptions, ScheduleRecord, SweepOutcome, CSV_HEADER,
};
pub use timing::{time_call, time_restore};

use crate::diffusion::DEFAULT_TRAIN_STEPS;
use crate::error::{Error, Result};
use crate::guidance::StepMode;
use crate::metrics::SSIM_WINDOW;
use crate::operators::{Task, DEFAULT_NOISE_SIGMA, SR_FACTOR};

/// Which tasks a sweep covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSelect {
    Sr4x,
    Deblur,
    #[default]
    Both,
}

impl TaskSelect {
    pub fn tasks(&self) -> Vec<Task> {
        match self {
            TaskSelect::Sr4x => vec![Task::Sr4x],
            TaskSelect::Deblur => vec![Task::Deblur],
            TaskSelect::Both => Task::ALL.to_vec(),
        }
    }
}

impl FromStr for TaskSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr4x" => Ok(TaskSelect::Sr4x),
            "deblur" => Ok(TaskSelect::Deblur),
            "both" => Ok(TaskSelect::Both),
            other => Err(Error::invalid(format!(
                "unknown task '{other}' (sr4x, deblur or both)"
            ))),
        }
    }
}

impl fmt::Display for TaskSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskSelect::Sr4x => "sr4x",
            TaskSelect::Deblur => "deblur",
            TaskSelect::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanSource {
    /// Pixelwise mean of the pair set's ground-truth images.
    Dataset,
}

/// Prior mean: a constant gray level or a dataset statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorMean {
    Constant(f64),
    From(MeanSource),
}

impl Default for PriorMean {
    fn default() -> Self {
        PriorMean::Constant(0.5)
    }
}

pub const DEFAULT_PRIOR_VAR: f64 = 0.05;

fn default_prior_var() -> f64 {
    DEFAULT_PRIOR_VAR
}

/// Analytic prior used in place of a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Isotropic Gaussian prior.
    Gaussian {
        #[serde(default)]
        prior_mean: PriorMean,
        #[serde(default = "default_prior_var")]
        prior_var: f64,
    },
    /// Equal-weight mixture of constant-level Gaussians.
    Gmm {
        levels: Vec<f64>,
        #[serde(default = "default_prior_var")]
        prior_var: f64,
    },
    /// Gaussian prior centered on a PCA projector's mean, with the projector
    /// applied after every guidance step. Without `projector_path` the
    /// projector is fitted to the pair set's ground truth.
    ProjectorAugmented {
        k: usize,
        #[serde(default = "default_prior_var")]
        prior_var: f64,
        #[serde(default)]
        projector_path: Option<PathBuf>,
    },
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Gaussian {
            prior_mean: PriorMean::default(),
            prior_var: DEFAULT_PRIOR_VAR,
        }
    }
}

/// Grid definition and inputs of a sweep. Field names double as config-file
/// keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub task: TaskSelect,
    pub inner_steps_list: Vec<usize>,
    pub ddim_steps_list: Vec<usize>,
    pub scales_list: Vec<f64>,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub working_side: usize,
    pub denoiser_spec: DenoiserSpec,
    pub warmup_runs: usize,
    pub noise_sigma: f64,
    pub step_mode: StepMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            task: TaskSelect::default(),
            inner_steps_list: vec![1, 3, 7, 15, 20],
            ddim_steps_list: vec![20, 50, 100],
            scales_list: vec![4.0, 7.5, 17.5],
            seed: 0,
            dataset_dir: PathBuf::new(),
            working_side: 64,
            denoiser_spec: DenoiserSpec::default(),
            warmup_runs: 2,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            step_mode: StepMode::Budget,
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    /// Number of grid cells per task.
    pub fn grid_size(&self) -> usize {
        self.inner_steps_list.len() * self.ddim_steps_list.len() * self.scales_list.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps_list.is_empty()
            || self.ddim_steps_list.is_empty()
            || self.scales_list.is_empty()
        {
            return Err(Error::invalid("sweep lists must be non-empty"));
        }
        if let Some(&n) = self
            .ddim_steps_list
            .iter()
            .find(|&&n| n == 0 || n > DEFAULT_TRAIN_STEPS)
        {
            return Err(Error::invalid(format!(
                "DDIM steps must be in 1..={DEFAULT_TRAIN_STEPS}, got {n}"
            )));
        }
        if let Some(&g) = self
            .scales_list
            .iter()
            .find(|&&g| !(g > 0.0 && g.is_finite()))
        {
            return Err(Error::invalid(format!(
                "guidance scales must be positive, got {g}"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if self.working_side < SSIM_WINDOW {
            return Err(Error::invalid(format!(
                "working_side must be at least {SSIM_WINDOW}, got {}",
                self.working_side
            )));
        }
        if self.task.tasks().contains(&Task::Sr4x) && !self.working_side.is_multiple_of(SR_FACTOR) {
            return Err(Error::invalid(format!(
                "sr4x needs working_side divisible by {SR_FACTOR}, got {}",
                self.working_side
            )));
        }
        Ok(())
    }
}
