//! Experiment configuration. Files are TOML; every key is optional and falls
//! back to the toy preset below.

use std::fs;
use std::path::{Path, PathBuf};

use erd_core::decode::DecodeConfig;
use erd_core::detector::HeadConfig;
use erd_core::distill::DistillConfig;
use erd_core::objective::Strategy;
use erd_core::optim::{LrSchedule, SgdConfig};
use erd_core::scene::{make_protocol, Protocol, SceneSpec, TaskSplit};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, ErdError, Result};

/// Which classification channels `L_model` supervises during an
/// incremental step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChannels {
    /// Only the categories introduced by the step.
    New,
    /// Every category seen so far; unlabeled old objects act as background.
    Seen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_step: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Learning-rate multiplier of incremental steps relative to `lr`.
    pub incremental_lr_scale: f64,
    pub sgd: SgdConfig,
    pub strategy: Strategy,
    pub model_channels: ModelChannels,
    /// Serial, ordered gradient accumulation.
    pub deterministic: bool,
    /// Compute teacher responses once per step instead of per iteration.
    pub teacher_cache: bool,
    /// Training images per step whose selections are dumped.
    pub dump_selections: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_step: 24,
            batch_size: 8,
            lr: LrSchedule::default(),
            incremental_lr_scale: 0.1,
            sgd: SgdConfig::default(),
            strategy: Strategy::ErdFull,
            model_channels: ModelChannels::New,
            deterministic: true,
            teacher_cache: true,
            dump_selections: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_step == 0 {
            return Err(ErdError::Config("epochs_per_step must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ErdError::Config("batch_size must be at least 1".into()));
        }
        if !(self.incremental_lr_scale > 0.0) {
            return Err(ErdError::Config("incremental_lr_scale must be positive".into()));
        }
        self.lr.validate()?;
        self.sgd.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name; derived from protocol and strategy when unset.
    pub name: Option<String>,
    /// Master seed: dataset generation, initialization and data order.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub protocol: Protocol,
    pub base_fraction: f64,
    /// Explicit split overriding `protocol`.
    pub split: Option<Vec<Vec<usize>>>,
    pub num_train: usize,
    pub num_test: usize,
    /// Test images compared by feature-distance reports.
    pub probe_count: usize,
    /// The scene seed is always replaced by `seed`.
    pub scene: SceneSpec,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            protocol: Protocol::OneStep,
            base_fraction: 0.5,
            split: None,
            num_train: 800,
            num_test: 200,
            probe_count: 10,
            scene: SceneSpec { image_size: 64, num_categories: 16, objects_per_image: (1, 4), min_box_side: 16, seed: 0 },
            head: HeadConfig { num_categories_total: 16, num_bins: 8, pyramid_strides: vec![8, 16], channels: 32 },
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| format_err(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Scene spec with the master seed applied.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec { seed: self.seed, ..self.scene.clone() }
    }

    pub fn task_split(&self) -> Result<TaskSplit> {
        Ok(match &self.split {
            Some(steps) => TaskSplit::new(steps.clone())?,
            None => make_protocol(self.protocol, self.base_fraction, self.scene.num_categories)?,
        })
    }

    pub fn run_name(&self) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None => format!("{}_{}", self.protocol.name(), self.train.strategy).replace(':', "_"),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_spec().validate()?;
        self.head.validate(self.scene.image_size)?;
        if self.head.num_categories_total < self.scene.num_categories {
            return Err(ErdError::Config(format!(
                "head has {} classification channels for {} categories",
                self.head.num_categories_total, self.scene.num_categories
            )));
        }
        if self.num_train == 0 || self.num_test == 0 {
            return Err(ErdError::Config("num_train and num_test must be positive".into()));
        }
        let name = self.run_name();
        if name.is_empty() || name.contains(['/', '\\']) || name == ".." {
            return Err(ErdError::Config(format!("invalid run name '{name}'")));
        }
        self.task_split()?;
        self.train.validate()?;
        self.distill.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[train]\nstrategy = \"topk:5\"\n", Path::new("x")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs_per_step, 24);
        assert_eq!(cfg.train.strategy.to_string(), "topk:5");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 3\n", Path::new("x")).is_err());
    }
}
