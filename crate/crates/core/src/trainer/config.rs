use serde::{Deserialize, Serialize};

use crate::bayes::BayesHyper;
use crate::data::Augment;
use crate::error::{Error, Result};
use crate::model::CENTER_LR;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    /// Adds the feature loss and the center updates.
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Phase::Main),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

/// Learning rates of the three parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Kernels `X`, batch-norm affine parameters and the classifier.
    pub main: f64,
    /// Modulation vectors `w` and spreads `σ`.
    pub modulation: f64,
    /// Modes `μ`.
    pub mu: f64,
}

impl LearningRates {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            main: self.main * s,
            modulation: self.modulation * s,
            mu: self.mu * s,
        }
    }
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            main: 0.1,
            modulation: 0.01,
            mu: 0.1,
        }
    }
}

/// Step decay: multiply every rate by `factor` each `period` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub factor: f64,
    pub period: usize,
}

fn scaled_period(period: usize, reference: usize, epochs: usize) -> usize {
    ((period * epochs) as f64 / reference as f64)
        .round()
        .max(1.0) as usize
}

impl Schedule {
    /// ×0.8 every 60 of 200 epochs, period rescaled to `epochs`.
    pub fn wrn(epochs: usize) -> Self {
        Self {
            factor: 0.8,
            period: scaled_period(60, 200, epochs),
        }
    }

    /// ×0.1 every 30 of 70 epochs, period rescaled to `epochs`.
    pub fn resnet(epochs: usize) -> Self {
        Self {
            factor: 0.1,
            period: scaled_period(30, 70, epochs),
        }
    }

    pub fn constant() -> Self {
        Self {
            factor: 1.0,
            period: usize::MAX,
        }
    }

    pub fn multiplier(&self, epoch: usize) -> f64 {
        self.factor.powi((epoch / self.period) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hyper: BayesHyper,
    pub lr: LearningRates,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub phase: Phase,
    /// Keep the kernel loss active during fine-tuning.
    pub kernel_loss_in_finetune: bool,
    pub center_lr: f64,
    pub augment: Augment,
    /// All reductions run in a fixed sequential order either way; recorded
    /// for the run manifest.
    pub deterministic: bool,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            hyper: BayesHyper::default(),
            lr: LearningRates::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::resnet(20),
            phase: Phase::Main,
            kernel_loss_in_finetune: true,
            center_lr: CENTER_LR,
            augment: Augment::None,
            deterministic: true,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let lr = &self.lr;
        for (name, v) in [
            ("main", lr.main),
            ("modulation", lr.modulation),
            ("mu", lr.mu),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "learning rate {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.schedule.period == 0 {
            return Err(Error::Config("schedule period must be positive".into()));
        }
        if !(self.schedule.factor.is_finite() && self.schedule.factor > 0.0) {
            return Err(Error::Config("schedule factor must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "momentum must be in [0, 1) and weight decay >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn kernel_loss_active(&self) -> bool {
        self.hyper.lambda > 0.0 && (self.phase == Phase::Main || self.kernel_loss_in_finetune)
    }

    pub fn feature_loss_active(&self) -> bool {
        self.hyper.theta > 0.0 && self.phase == Phase::Finetune
    }
}

/// Learning rates in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> LearningRates {
    cfg.lr.scaled(cfg.schedule.multiplier(epoch))
}
