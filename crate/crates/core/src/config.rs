//! JSON run configuration.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "mode": "l3doc",
//!   "seed": 7,
//!   "factor": { "n_hat": 8, "l_hat": 8, "s": 2 },
//!   "backbone": { "widths": [3, 32, 32, 64], "head_widths": [32] },
//!   "mam": { "lambda_l": 1.0 },
//!   "training": { "epochs": 60, "batch_size": 16, "learning_rate": 0.001 },
//!   "data": { "synthetic": { "classes": ["sphere", "cube", "cone"],
//!             "num_tasks": 2, "classes_per_task": 2,
//!             "per_class": 20, "points": 64, "noise": 0.01 } }
//! }
//! ```
//!
//! Every section except `schema_version` and `data` has defaults; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::datasets::{self, make_split_plan, Primitive, SplitPlan, TaskDataset};
use crate::error::{Error, Result};
use crate::mam::MamConfig;
use crate::metrics::PpaMode;
use crate::trainer::{ExperimentConfig, FactorConfig, Mode, TrainingConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub factor: FactorConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub mam: MamConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ppa: PpaMode,
    pub data: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Directory(DirectorySource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    /// Pool of primitives the task split draws from.
    pub classes: Vec<Primitive>,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub per_class: usize,
    pub points: usize,
    #[serde(default)]
    pub noise: f64,
    /// Explicit per-task classes; overrides the seeded split when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<Vec<Primitive>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectorySource {
    pub root: PathBuf,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<Vec<String>>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.experiment().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            mode: self.mode,
            seed: self.seed,
            factor: self.factor.clone(),
            backbone: self.backbone.clone(),
            mam: self.mam.clone(),
            training: self.training.clone(),
            ppa: self.ppa,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config is serializable");
        s.push('\n');
        s
    }
}

fn task_seed(seed: u64, task: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (task as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Split plan and per-task datasets described by `data`.
pub fn load_tasks(data: &DataSource, seed: u64) -> Result<(SplitPlan, Vec<TaskDataset>)> {
    match data {
        DataSource::Synthetic(src) => {
            let tasks: Vec<Vec<Primitive>> = match &src.tasks {
                Some(t) => t.clone(),
                None => {
                    let names: Vec<String> =
                        src.classes.iter().map(|c| c.name().to_string()).collect();
                    let plan = make_split_plan(&names, src.num_tasks, src.classes_per_task, seed)?;
                    plan.tasks
                        .iter()
                        .map(|t| t.iter().map(|n| n.parse()).collect::<Result<Vec<_>>>())
                        .collect::<Result<_>>()?
                }
            };
            let plan = SplitPlan {
                seed,
                tasks: tasks
                    .iter()
                    .map(|t| t.iter().map(|c| c.name().to_string()).collect())
                    .collect(),
            };
            let datasets = tasks
                .iter()
                .enumerate()
                .map(|(i, classes)| {
                    datasets::gen_synthetic(
                        i + 1,
                        classes,
                        src.per_class,
                        src.points,
                        src.noise,
                        task_seed(seed, i + 1),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((plan, datasets))
        }
        DataSource::Directory(src) => {
            let plan = match &src.tasks {
                Some(t) => SplitPlan {
                    seed,
                    tasks: t.clone(),
                },
                None => {
                    let names = datasets::list_classes(&src.root)?;
                    make_split_plan(&names, src.num_tasks, src.classes_per_task, seed)?
                }
            };
            let datasets = plan
                .tasks
                .iter()
                .enumerate()
                .map(|(i, classes)| {
                    datasets::load_task(
                        &src.root,
                        i + 1,
                        classes,
                        src.points,
                        task_seed(seed, i + 1),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((plan, datasets))
        }
    }
}
