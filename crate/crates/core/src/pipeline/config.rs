use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::inflation::Replication;
use crate::models::{Architecture, TrunkConfig};
use crate::optim::StepSchedule;

/// Everything a run reads. Every key has a default; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed used when the command line gives none.
    pub seed: u64,
    /// Where checkpoints and metrics go.
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub distill: DistillConfig,
    pub teacher: TeacherConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            distill: DistillConfig::default(),
            teacher: TeacherConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Student architecture for distillation and finetuning.
    pub student: Architecture,
    pub trunk: TrunkConfig,
    /// Inflation variant: `scaled` (slices `w/k_t`) or `unscaled`.
    pub replication: ReplicationName,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            student: Architecture::R2Plus1dTiny,
            trunk: TrunkConfig::default(),
            replication: ReplicationName::Scaled,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplicationName {
    #[default]
    Scaled,
    Unscaled,
}

impl From<ReplicationName> for Replication {
    fn from(r: ReplicationName) -> Self {
        match r {
            ReplicationName::Scaled => Replication::Scaled,
            ReplicationName::Unscaled => Replication::Unscaled,
        }
    }
}

/// Hyperparameters of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOptim {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl PhaseOptim {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule { base_lr: self.lr, gamma: self.lr_gamma, step_epochs: self.lr_step_epochs }
    }

    fn validate(&self, phase: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("optim.{phase}: need lr > 0 and momentum in [0,1)")));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.lr_gamma.is_nan() || self.lr_gamma <= 0.0 {
            return Err(Error::Config(format!("optim.{phase}: need weight_decay >= 0 and lr_gamma > 0")));
        }
        if self.epochs == 0 || self.batch_size < 2 || self.lr_step_epochs == 0 {
            return Err(Error::Config(format!(
                "optim.{phase}: need epochs >= 1, lr_step_epochs >= 1 and batch_size >= 2"
            )));
        }
        Ok(())
    }
}

/// Keys missing from a phase section keep that phase's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(deserialize_with = "teacher_phase")]
    pub teacher: PhaseOptim,
    #[serde(deserialize_with = "distill_phase")]
    pub distill: PhaseOptim,
    #[serde(deserialize_with = "finetune_phase")]
    pub finetune: PhaseOptim,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialPhase {
    lr: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    lr_gamma: Option<f64>,
    lr_step_epochs: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
}

impl PartialPhase {
    fn over(self, d: PhaseOptim) -> PhaseOptim {
        PhaseOptim {
            lr: self.lr.unwrap_or(d.lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            lr_gamma: self.lr_gamma.unwrap_or(d.lr_gamma),
            lr_step_epochs: self.lr_step_epochs.unwrap_or(d.lr_step_epochs),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
        }
    }
}

fn teacher_phase<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<PhaseOptim, D::Error> {
    Ok(PartialPhase::deserialize(d)?.over(OptimConfig::default().teacher))
}

fn distill_phase<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<PhaseOptim, D::Error> {
    Ok(PartialPhase::deserialize(d)?.over(OptimConfig::default().distill))
}

fn finetune_phase<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<PhaseOptim, D::Error> {
    Ok(PartialPhase::deserialize(d)?.over(OptimConfig::default().finetune))
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            teacher: PhaseOptim {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                lr_gamma: 0.1,
                lr_step_epochs: 10,
                epochs: 20,
                batch_size: 64,
            },
            distill: PhaseOptim {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                lr_gamma: 0.1,
                lr_step_epochs: 5,
                epochs: 15,
                batch_size: 16,
            },
            finetune: PhaseOptim {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-3,
                lr_gamma: 0.1,
                lr_step_epochs: 2,
                epochs: 8,
                batch_size: 16,
            },
        }
    }
}

/// Which labels a teacher is trained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherTask {
    /// Shape classes from `teacher-images`.
    #[default]
    Appearance,
    /// Background pattern classes from `teacher-scenes`.
    Scene,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub task: TeacherTask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    Scratch,
    /// From a teacher checkpoint (inflated on the fly) or an inflated student checkpoint.
    Inflate,
    /// From a distillation checkpoint.
    Distill,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub init: InitKind,
    pub from: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub clips_per_video: usize,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { clips_per_video: 1, top_k: 5 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.distill.validate()?;
        self.optim.teacher.validate("teacher")?;
        self.optim.distill.validate("distill")?;
        self.optim.finetune.validate("finetune")?;
        if !self.model.student.is_student() {
            return Err(Error::Config(format!("model.student `{}` is not a video model", self.model.student)));
        }
        if self.model.trunk.in_channels != self.data.channels {
            return Err(Error::Config(format!(
                "model.trunk.in_channels ({}) differs from data.channels ({})",
                self.model.trunk.in_channels, self.data.channels
            )));
        }
        if self.data.frames < self.model.trunk.min_frames() {
            return Err(Error::Config(format!(
                "data.frames ({}) is below the {} frames the trunk needs",
                self.data.frames,
                self.model.trunk.min_frames()
            )));
        }
        if self.eval.clips_per_video == 0 || self.eval.top_k == 0 {
            return Err(Error::Config("eval.clips_per_video and eval.top_k must be >= 1".into()));
        }
        Ok(())
    }

    /// The defaults-merged document.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the effective config document.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Writes the effective config next to a checkpoint: `<ckpt>.config.toml`.
    pub fn write_beside(&self, checkpoint: &Path) -> Result<PathBuf> {
        let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
        name.push(".config.toml");
        let path = checkpoint.with_file_name(name);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_phase_keeps_its_own_defaults() {
        let c = RunConfig::from_toml("[optim.distill]\nepochs = 2\n").unwrap();
        let d = OptimConfig::default();
        assert_eq!(c.optim.distill, PhaseOptim { epochs: 2, ..d.distill });
        assert_eq!(c.optim.finetune, d.finetune);
        assert!(RunConfig::from_toml("[optim.teacher]\nlrr = 1.0\n").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let text = r#"
            seed = 7
            [model]
            student = "res3d-tiny"
            [model.trunk]
            widths = [4, 8]
            [optim.finetune]
            lr = 0.1
            momentum = 0.0
            weight_decay = 0.0
            lr_gamma = 0.5
            lr_step_epochs = 1
            epochs = 2
            batch_size = 4
            [distill]
            tau = 2.0
            pick_strategy = "k-random:2"
            loss = "mse-logits"
            teachers = [{ checkpoint = "a.ckpt" }, { checkpoint = "b.ckpt", weight = 0.5 }]
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.model.trunk.widths, [4, 8]);
        assert_eq!(cfg.distill.teachers[0].weight, 1.0);
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("colour = 1").is_err());
        assert!(RunConfig::from_toml("[model]\ndepth = 18").is_err());
        assert!(RunConfig::from_toml("[optim.momentum]\nlr = 0.1").is_err());
        assert!(RunConfig::from_toml("[distill]\ntemperature = 1.0").is_err());
    }

    #[test]
    fn inconsistent_values_rejected() {
        assert!(RunConfig::from_toml("[model]\nstudent = \"teacher2d-tiny\"").is_err());
        assert!(RunConfig::from_toml("[data]\nchannels = 3").is_err());
        assert!(RunConfig::from_toml("[model.trunk]\ntemporal_padding = false").is_err());
        assert!(RunConfig::from_toml("[eval]\ntop_k = 0").is_err());
    }
}
