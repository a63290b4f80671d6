//! Staged training: warmup, joint optimization, pruning of empty balls, and
//! last-layer finetuning.

mod ablation;
mod eval;
mod optim;
mod pipeline;
mod prune;
mod stage;

use std::fmt;

use rayon::prelude::*;

pub use ablation::{
    ablate, ablation_sidecar, format_ablation, AblationAxis, AblationOutcome, AblationRow,
    RADIUS_PRESETS,
};
pub use eval::{evaluate, ClassAccuracy, EvalReport};
pub use optim::{Adam, OptimizerConfig};
pub use pipeline::{
    checkpoint_path, finetune_checkpoint, latest_checkpoint, prepare_splits, prune_checkpoint,
    run_pipeline, run_until, write_metrics, PipelineReport, PreparedSplits,
};
pub use prune::{count_members, member_counts, prune_empty_balls, prune_with_counts, PruneReport};
pub use stage::{finetune_last_layer, run_stage};

use crate::config::{Config, StageConfig};
use crate::data::{image_to_tensor, Sample};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ParamGroup;
use crate::nn::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageKind {
    Warmup,
    Joint,
    Finetune,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Warmup => "warmup",
            StageKind::Joint => "joint",
            StageKind::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "warmup" => Some(StageKind::Warmup),
            "joint" => Some(StageKind::Joint),
            "finetune" => Some(StageKind::Finetune),
            _ => None,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training stage: which groups train at which rate, for how long.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub kind: StageKind,
    pub epochs: usize,
    /// Learning rate per group, indexed like [`ParamGroup::ALL`].
    pub learning_rates: [f64; 5],
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub l1: f64,
    pub losses: LossWeights,
}

fn group_index(g: ParamGroup) -> usize {
    ParamGroup::ALL
        .iter()
        .position(|&x| x == g)
        .expect("known group")
}

impl StageSpec {
    pub fn from_config(kind: StageKind, cfg: &StageConfig, losses: LossWeights) -> Self {
        StageSpec {
            kind,
            epochs: cfg.epochs,
            learning_rates: [
                cfg.lr_backbone,
                cfg.lr_addon,
                cfg.lr_centers,
                cfg.lr_radii,
                cfg.lr_last_layer,
            ],
            lr_step_epochs: cfg.lr_step_epochs,
            lr_gamma: cfg.lr_gamma,
            l1: cfg.l1,
            losses,
        }
    }

    pub fn lr(&self, g: ParamGroup) -> f64 {
        self.learning_rates[group_index(g)]
    }

    pub fn set_lr(&mut self, g: ParamGroup, lr: f64) {
        self.learning_rates[group_index(g)] = lr;
    }

    /// Groups with a nonzero learning rate.
    pub fn trainable(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|&g| self.lr(g) > 0.0)
            .collect()
    }

    /// Learning-rate multiplier in effect during `epoch`.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.lr_step_epochs) {
            Some(steps) => self.lr_gamma.powi(steps as i32),
            None => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .learning_rates
            .iter()
            .any(|lr| !(lr.is_finite() && *lr >= 0.0))
        {
            return Err(Error::Schedule(format!(
                "{}: learning rates must be finite and >= 0",
                self.kind
            )));
        }
        match self.kind {
            StageKind::Warmup if self.lr(ParamGroup::Backbone) > 0.0 => {
                Err(Error::Schedule("warmup must not train the backbone".into()))
            }
            StageKind::Finetune if self.trainable().iter().any(|&g| g != ParamGroup::LastLayer) => {
                Err(Error::Schedule(
                    "finetune trains only the last layer".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Ordered stages plus optimizer settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSchedule {
    pub stages: Vec<StageSpec>,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainingSchedule {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let s = &cfg.schedule;
        let schedule = TrainingSchedule {
            stages: vec![
                StageSpec::from_config(StageKind::Warmup, &s.warmup, cfg.losses),
                StageSpec::from_config(StageKind::Joint, &s.joint, cfg.losses),
                StageSpec::from_config(StageKind::Finetune, &s.finetune, cfg.losses),
            ],
            optimizer: OptimizerConfig {
                beta1: s.beta1,
                beta2: s.beta2,
                epsilon: s.adam_epsilon,
                weight_decay: s.weight_decay,
            },
            batch_size: s.batch_size,
            seed: s.seed,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Schedule("batch size must be positive".into()));
        }
        for pair in self.stages.windows(2) {
            if pair[0].kind >= pair[1].kind {
                return Err(Error::Schedule(format!(
                    "stages must run warmup → joint → finetune, found {} before {}",
                    pair[0].kind, pair[1].kind
                )));
            }
        }
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    pub fn stage(&self, kind: StageKind) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.kind == kind)
    }
}

/// Loss components averaged over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// (component name, mean value), in a fixed order.
    pub components: Vec<(&'static str, f64)>,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub stage: StageKind,
    pub epochs: Vec<EpochLog>,
}

impl StageLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Normalized image tensors with labels, ready for training or evaluation.
#[derive(Clone, Debug, Default)]
pub struct LabeledTensors {
    pub ids: Vec<String>,
    pub inputs: Vec<FeatureMap>,
    pub labels: Vec<usize>,
}

impl LabeledTensors {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        LabeledTensors {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            inputs: samples
                .par_iter()
                .map(|s| image_to_tensor(&s.image))
                .collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
