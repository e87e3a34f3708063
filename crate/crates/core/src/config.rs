use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

/// Initialization of the new adapter modules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaInit {
    /// Group-wise centre tap 1, point-wise zero: the adapters start as a no-op.
    Identity,
    /// Independent Gaussian entries.
    Random { std: f64 },
}

/// Hyperparameter lists searched by the grid harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridLattice {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub lambda_news: Vec<f64>,
}

impl GridLattice {
    pub const LAMBDA_NEW: [f64; 11] = [0.001, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.997];

    /// Two learning rates, three decay strengths, eleven initial weights.
    pub fn standard() -> Self {
        Self {
            lrs: vec![1e-2, 1e-3],
            weight_decays: vec![0.0, 1e-5, 1e-4],
            lambda_news: Self::LAMBDA_NEW.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.lrs.len() * self.weight_decays.len() * self.lambda_news.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in lattice order: learning rate outermost, then decay, then
    /// initial weight.
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &lr in &self.lrs {
            for &weight_decay in &self.weight_decays {
                for &lambda_new in &self.lambda_news {
                    out.push(TrainConfig {
                        lr,
                        weight_decay,
                        lambda_new,
                        grid: None,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the distance-correlation penalty.
    pub sigma: f64,
    pub seed: u64,
    /// Initial weight of the new module in every mixing row.
    pub lambda_new: f64,
    pub theta_init: ThetaInit,
    #[serde(default)]
    pub grid: Option<GridLattice>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 30,
            batch_size: 128,
            sigma: 0.05,
            seed: 0,
            lambda_new: 0.5,
            theta_init: ThetaInit::Identity,
            grid: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("weight decay", self.weight_decay), ("sigma", self.sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let ThetaInit::Random { std } = self.theta_init {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::invalid("random init std must be non-negative"));
            }
        }
        if let Some(grid) = &self.grid {
            if grid.is_empty() {
                return Err(Error::invalid("grid lattice is empty"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}
