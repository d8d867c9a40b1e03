//! Optimisation schedule, Nesterov SGD, checkpoints, the training loop and
//! dataset evaluation.

mod checkpoint;
mod eval;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, evaluate_dirs, evaluate_with, predict_image};
pub use trainer::{checkpoint_name, train, train_pairs, LogRow, TrainLog, TrainOutcome, LOG_FILE};

use crate::error::{Error, Result};
use crate::metrics::LossConfig;
use crate::model::{ModelConfig, Param};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub momentum_phase1: f64,
    pub momentum_phase2: f64,
    /// First epoch (0-based) of the second phase.
    pub phase_boundary: usize,
    /// Time-based decay applied per update: `lr / (1 + decay · updates)`.
    pub decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 75,
            batch_size: 8,
            lr_phase1: 0.1,
            lr_phase2: 0.01,
            momentum_phase1: 0.75,
            momentum_phase2: 0.95,
            phase_boundary: 50,
            decay: 1e-5,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

/// Phase boundary used when none is given: epoch 50, or two thirds of the
/// run for runs too short to reach it.
pub fn default_phase_boundary(epochs: usize) -> usize {
    50.min(2 * epochs / 3)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.phase_boundary >= self.epochs {
            return Err(Error::Config(format!(
                "phase boundary {} must be below the epoch count {}",
                self.phase_boundary, self.epochs
            )));
        }
        for (name, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{} must be positive, got {}", name, v)));
            }
        }
        for (name, v) in [
            ("momentum_phase1", self.momentum_phase1),
            ("momentum_phase2", self.momentum_phase2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{} must lie in [0, 1), got {}", name, v)));
            }
        }
        if !(self.decay >= 0.0) || !self.decay.is_finite() {
            return Err(Error::Config(format!("decay must be non-negative, got {}", self.decay)));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Learning rate and momentum for an update in `epoch` after `updates`
/// earlier updates.
pub fn lr_schedule(epoch: usize, updates: u64, cfg: &TrainConfig) -> (f64, f64) {
    let (base, momentum) = if epoch < cfg.phase_boundary {
        (cfg.lr_phase1, cfg.momentum_phase1)
    } else {
        (cfg.lr_phase2, cfg.momentum_phase2)
    };
    (base / (1.0 + cfg.decay * updates as f64), momentum)
}

/// One Nesterov step on a single tensor:
/// `v ← m·v − lr·g`, `θ ← θ + m·v − lr·g`.
pub fn sgd_nesterov_step<T: Float>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    param.expect_same_shape(grad)?;
    param.expect_same_shape(velocity)?;
    let (lr, m) = (T::from_f64(lr), T::from_f64(momentum));
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = m * *v - lr * g;
        *p = *p + m * *v - lr * g;
    }
    Ok(())
}

/// Velocity buffers for every parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct NesterovSgd<T: Float> {
    velocities: Vec<Tensor<T>>,
}

impl<T: Float> NesterovSgd<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        Self {
            velocities: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn from_velocities(velocities: Vec<Tensor<T>>) -> Self {
        Self { velocities }
    }

    pub fn velocities(&self) -> &[Tensor<T>] {
        &self.velocities
    }

    /// Updates every parameter from its stored gradient; a missing gradient
    /// counts as zero.
    pub fn step(&mut self, params: &mut [Param<T>], lr: f64, momentum: f64) -> Result<()> {
        if params.len() != self.velocities.len() {
            return Err(Error::Contract(format!(
                "optimiser holds {} velocities for {} parameters",
                self.velocities.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            let grad = match &p.grad {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape()),
            };
            sgd_nesterov_step(&mut p.value, &grad, v, lr, momentum)
                .map_err(|e| Error::Shape(format!("{}: {}", p.name, e)))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 0, &cfg), (0.1, 0.75));
        assert_eq!(lr_schedule(49, 0, &cfg), (0.1, 0.75));
        assert_eq!(lr_schedule(50, 0, &cfg), (0.01, 0.95));
        let (lr, m) = lr_schedule(10, 10_000, &cfg);
        assert_eq!(lr, 0.1 / 1.1);
        assert_eq!(m, 0.75);
    }

    #[test]
    fn zero_gradient_and_velocity_leave_param() {
        let mut p = Tensor::<f64>::full(&[3], 0.7);
        let mut v = Tensor::zeros(&[3]);
        sgd_nesterov_step(&mut p, &Tensor::zeros(&[3]), &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p.data(), &[0.7; 3]);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut v = Tensor::zeros(&[]);
        sgd_nesterov_step(&mut p, &Tensor::scalar(1.0), &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[0.9]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(sgd_nesterov_step(&mut p, &Tensor::zeros(&[3]), &mut v, 0.1, 0.5).is_err());
    }

    #[test]
    fn validation_rejects_late_boundary() {
        let cfg = TrainConfig {
            epochs: 10,
            phase_boundary: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(default_phase_boundary(75), 50);
        assert_eq!(default_phase_boundary(150), 50);
        assert_eq!(default_phase_boundary(3), 2);
        assert_eq!(default_phase_boundary(1), 0);
    }
}
