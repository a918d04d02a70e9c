use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_global_norm, FeedForwardNet, Gradients, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub optimizer: OptimizerKind,
    /// Cosine decay of the learning rate down to `learning_rate * final_lr_factor`.
    /// `1.0` keeps it constant.
    pub final_lr_factor: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 128,
            epochs: 50,
            seed: 0,
            clip_norm: Some(10.0),
            optimizer: OptimizerKind::Adam,
            final_lr_factor: 1.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.final_lr_factor > 0.0 && self.final_lr_factor <= 1.0) {
            return Err(Error::Config("final_lr_factor must lie in (0, 1]".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.final_lr_factor >= 1.0 || total <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / (total - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_factor + (1.0 - self.final_lr_factor) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

/// Minibatch training loop.
///
/// `loss_fn` receives the current network, the batch and the trainer's RNG
/// (for any per-sample randomness the loss needs) and returns the mean batch
/// loss with its parameter gradients. Identical seeds and data give
/// bit-identical parameters.
pub fn train<T, D, F>(
    net: &mut FeedForwardNet<T>,
    data: &[D],
    config: &TrainerConfig,
    mut loss_fn: F,
) -> Result<TrainReport>
where
    T: Scalar,
    F: FnMut(&FeedForwardNet<T>, &[&D], &mut ChaCha8Rng) -> Result<(T, Gradients<T>)>,
{
    train_joint(std::slice::from_mut(net), data, config, |nets, batch, rng| {
        let (loss, g) = loss_fn(&nets[0], batch, rng)?;
        Ok((loss, vec![g]))
    })
}

/// [`train`] for several networks optimized together; `loss_fn` returns one
/// gradient set per network. Clipping uses the joint norm.
pub fn train_joint<T, D, F>(
    nets: &mut [FeedForwardNet<T>],
    data: &[D],
    config: &TrainerConfig,
    mut loss_fn: F,
) -> Result<TrainReport>
where
    T: Scalar,
    F: FnMut(&[FeedForwardNet<T>], &[&D], &mut ChaCha8Rng) -> Result<(T, Vec<Gradients<T>>)>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opts: Vec<Optimizer<T>> = nets
        .iter()
        .map(|n| Optimizer::new(config.optimizer, config.beta1, config.beta2, n))
        .collect();
    let batches_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let param_norm = |nets: &[FeedForwardNet<T>]| nets.iter().map(|n| n.param_norm().powi(2)).sum::<f64>().sqrt();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&D> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, mut grads) = loss_fn(nets, &batch, &mut rng)?;
            if grads.len() != nets.len() {
                return Err(Error::DimensionMismatch {
                    what: "gradient sets",
                    expected: nets.len(),
                    got: grads.len(),
                });
            }
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() || !grads.iter().all(Gradients::all_finite) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    param_norm: param_norm(nets),
                });
            }
            if let Some(c) = config.clip_norm {
                if grads.len() == 1 {
                    clip_global_norm(&mut grads[0], T::lit(c));
                } else {
                    let norm = grads.iter().map(|g| g.norm().to_f64_lossy().powi(2)).sum::<f64>().sqrt();
                    if norm > c {
                        grads.iter_mut().for_each(|g| g.scale(T::lit(c / norm)));
                    }
                }
            }
            let lr = T::lit(config.lr_at(step, total_steps));
            for ((net, opt), g) in nets.iter_mut().zip(&mut opts).zip(&grads) {
                opt.step(net, g, lr);
            }
            step += 1;
            weighted += loss * chunk.len() as f64;
        }
        history.push(weighted / data.len() as f64);
    }
    Ok(TrainReport {
        loss_history: history,
        steps: step,
    })
}
