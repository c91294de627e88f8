use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CellKind, ModelConfig};
use crate::regularizers::{NormReduction, RegularizationConfig};

pub const DEFAULT_SEED: u64 = 1111;

/// Hyperparameters of one training run. Defaults give the medium (h=650)
/// Penn Treebank recipe with AR and TAR enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_divisor: f64,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub bptt: usize,
    pub dp: f64,
    pub dp_h: f64,
    pub alpha: f64,
    pub beta: f64,
    pub reduction: NormReduction,
    pub seed: u64,
    pub cell: CellKind,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub tied: bool,
    /// Training stops once the annealed rate falls below this.
    pub min_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 20.0,
            lr_decay_divisor: 4.0,
            max_epochs: 80,
            clip_norm: 10.0,
            weight_decay: 1e-7,
            batch_size: 20,
            eval_batch_size: 10,
            bptt: 35,
            dp: 0.5,
            dp_h: 0.4,
            alpha: 5.0,
            beta: 2.0,
            reduction: NormReduction::MeanNorm,
            seed: DEFAULT_SEED,
            cell: CellKind::Lstm,
            hidden_size: 650,
            num_layers: 2,
            tied: true,
            min_lr: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            cell: self.cell,
            vocab_size,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            dp: self.dp,
            dp_h: self.dp_h,
            tied: self.tied,
        }
    }

    pub fn regularization(&self) -> RegularizationConfig {
        RegularizationConfig {
            alpha: self.alpha,
            beta: self.beta,
            reduction: self.reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_decay_divisor", self.lr_decay_divisor),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lr0", self.lr0), ("weight_decay", self.weight_decay), ("min_lr", self.min_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.bptt == 0 {
            return Err(Error::Config(
                "batch_size, eval_batch_size and bptt must be positive".into(),
            ));
        }
        self.model_config(1).validate()?;
        self.regularization().validate()
    }
}
