//! Experiment configuration file (TOML).
//!
//! ```toml
//! task = "ss"                  # ss | cd | mt
//! output_dir = "runs/desk"
//!
//! [model]                      # UNetConfig; desk-sized by default
//! [schedule]                   # kind, base_steps, T, family parameters
//! [train]                      # supervised / multi-task optimization
//! [pretrain]                   # denoising pretraining optimization
//! [loss]                       # class_weights, lambda_cd, lambda_ss
//! [data]                       # ss_root, cd_root, pretrain_root, split names
//! ```
//!
//! Every key is optional. Unknown keys are rejected, all of them listed at once.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::model::UNetConfig;
use crate::objectives::{ClassWeights, MultiTaskWeights};
use crate::schedule::ScheduleSpec;
use crate::training::TrainConfig;
use crate::{Error, Result, Task};

/// What a training run optimizes: one task or both jointly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RunTask {
    Ss,
    Cd,
    Mt,
}

impl RunTask {
    pub fn single(self) -> Option<Task> {
        match self {
            RunTask::Ss => Some(Task::Ss),
            RunTask::Cd => Some(Task::Cd),
            RunTask::Mt => None,
        }
    }
}

impl fmt::Display for RunTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunTask::Ss => "ss",
            RunTask::Cd => "cd",
            RunTask::Mt => "mt",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Overrides the class weights stored with the dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<ClassWeights>,
    pub lambda_cd: f64,
    pub lambda_ss: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = MultiTaskWeights::default();
        Self {
            class_weights: None,
            lambda_cd: w.lambda_cd,
            lambda_ss: w.lambda_ss,
        }
    }
}

impl LossConfig {
    pub fn multitask(&self) -> Result<MultiTaskWeights> {
        MultiTaskWeights::new(self.lambda_cd, self.lambda_ss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ss_root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cd_root: Option<PathBuf>,
    /// Image corpus for pretraining; falls back to the segmentation root.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_root: Option<PathBuf>,
    pub train_split: Split,
    pub val_split: Split,
    pub test_split: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ss_root: None,
            cd_root: None,
            pretrain_root: None,
            train_split: Split::Train,
            val_split: Split::Val,
            test_split: Split::Test,
        }
    }
}

impl DataConfig {
    pub fn root(&self, task: Task) -> Result<&Path> {
        let (root, key) = match task {
            Task::Ss => (&self.ss_root, "data.ss_root"),
            Task::Cd => (&self.cd_root, "data.cd_root"),
        };
        root.as_deref()
            .ok_or_else(|| Error::Config(format!("{key} is not set")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: RunTask,
    pub output_dir: PathBuf,
    pub model: UNetConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: RunTask::Ss,
            output_dir: PathBuf::from("runs"),
            model: UNetConfig::desk(),
            schedule: ScheduleSpec::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig::pretrain_defaults(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn key_paths(value: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            key_paths(v, &path, out);
            out.insert(path);
        }
    }
}

impl ExperimentConfig {
    /// A config with every optional key present; its key tree is the schema.
    fn schema() -> toml::Value {
        let mut full = Self::default();
        full.train.t_max = Some(1);
        full.pretrain.t_max = Some(1);
        full.loss.class_weights = Some(ClassWeights::uniform(2));
        full.data.ss_root = Some(PathBuf::new());
        full.data.cd_root = Some(PathBuf::new());
        full.data.pretrain_root = Some(PathBuf::new());
        toml::Value::try_from(&full).expect("config serializes")
    }

    /// Dotted paths of keys in `value` that the schema does not know.
    pub fn unknown_keys(value: &toml::Value) -> Vec<String> {
        let (mut known, mut given) = (BTreeSet::new(), BTreeSet::new());
        key_paths(&Self::schema(), "", &mut known);
        key_paths(value, "", &mut given);
        given
            .into_iter()
            .filter(|k| !known.contains(k))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let sched = crate::schedule::ScheduleConfig::from_spec(&self.schedule, Task::Ss)?;
        self.train.validate(sched.total_steps())?;
        self.pretrain.validate(sched.total_steps())?;
        if self.task == RunTask::Mt {
            self.loss.multitask()?;
        }
        if let Some(w) = &self.loss.class_weights {
            if w.num_classes() != self.model.out_classes {
                return Err(Error::Config(format!(
                    "loss.class_weights has {} entries for {} classes",
                    w.num_classes(),
                    self.model.out_classes
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let unknown = Self::unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg: ExperimentConfig = "".parse().unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.schedule.total_steps, 1000);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.grad_accum, 2);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.class_weights = Some(ClassWeights::foreground_ratio(3.0).unwrap());
        cfg.data.cd_root = Some("data/cd".into());
        cfg.train.t_max = Some(800);
        let back: ExperimentConfig = cfg.to_toml().parse().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let text = "bogus = 1\n[train]\nlr = 0.001\nlearning_rate = 3\n[schedule]\nT = 500\nkindd = \"cosine\"\n";
        let err = text.parse::<ExperimentConfig>().unwrap_err().to_string();
        for key in ["bogus", "train.learning_rate", "schedule.kindd"] {
            assert!(err.contains(key), "{err}");
        }
        assert!(!err.contains("train.lr,"), "{err}");
    }

    #[test]
    fn schedule_keys_are_normative() {
        let cfg: ExperimentConfig = "[schedule]\nkind = \"cosine\"\nbase_steps = 500\nT = 200\n".parse().unwrap();
        assert_eq!(cfg.schedule.total_steps, 200);
        assert_eq!(cfg.schedule.base_steps, 500);
        let cfg: ExperimentConfig = "[loss]\nclass_weights = [1.0, 3.0]\nlambda_cd = 0.7\nlambda_ss = 1.3\n".parse().unwrap();
        assert_eq!(cfg.loss.class_weights.unwrap().as_slice(), &[1.0, 3.0]);
        assert!("[loss]\nclass_weights = [1.0, -3.0]\n".parse::<ExperimentConfig>().is_err());
    }
}
