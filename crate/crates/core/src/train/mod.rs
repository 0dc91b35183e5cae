//! Once-for-all quantization-aware training of vertical-layered networks.

pub mod ascending;
pub mod init;
pub mod joint;
pub mod kd;
pub mod moo;
pub mod net;
pub mod optim;
pub mod ste;
pub mod tape;

use serde::{Deserialize, Serialize};

pub use ascending::{train_ascending, AscendingOutcome};
pub use joint::{train_joint, EpochRecord, IterRecord, MetricRecord, RunContext, TrainOutcome};
pub use net::{Network, ParamGroup, ParamId, ParamKind};
pub use tape::{Grads, NodeId, Tape, Tensor};

/// How per-level losses are combined into the shared-parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MooMode {
    /// Equal weights `1/(n+1)`.
    #[default]
    Us,
    /// Min-norm point of the per-level gradients.
    Mgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    Off,
    #[default]
    Cos,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// One set of statistics and affine parameters for every level.
    Shared,
    /// Per-level running statistics, shared affine parameters.
    Stats,
    /// Per-level statistics and affine parameters.
    #[default]
    Full,
}

/// Architecture and vertical layout of the trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: crate::model::SampleShape,
    pub layers: Vec<crate::model::LayerSpec>,
    pub basic_bits: u32,
    pub n: usize,
    pub compensation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::lr")]
    pub pretrain_lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub moo: MooMode,
    #[serde(default)]
    pub kd: KdMode,
    #[serde(default)]
    pub bn: BnMode,
    /// Scale step-size gradients by `1/sqrt(N·Q_P)`.
    #[serde(default = "defaults::yes")]
    pub grad_scale: bool,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn epochs() -> usize {
        10
    }
    pub fn pretrain_epochs() -> usize {
        2
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn yes() -> bool {
        true
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: defaults::epochs(),
            pretrain_epochs: defaults::pretrain_epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            pretrain_lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            moo: MooMode::Us,
            kd: KdMode::Cos,
            bn: BnMode::Full,
            grad_scale: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}
