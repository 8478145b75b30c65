//! Mini-batch training with Adam. Single-threaded and seeded, so a fixed
//! configuration reproduces the same parameters bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, LossBreakdown, LossWeights, Model};
use crate::error::{Error, Result};
use crate::math::sqrt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the calibration loss.
    pub lambda: f64,
    /// Weight of the diversity (uniqueness) loss.
    pub mu: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Requests per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lambda: 0.1, mu: 0.1, learning_rate: 1e-3, epochs: 4, batch_size: 16, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.mu >= 0.0 && self.lambda.is_finite() && self.mu.is_finite()) {
            return Err(Error::Config("lambda and mu must be finite and nonnegative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, mu: self.mu }
    }
}

/// Sample-weighted mean of the pre-step batch losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub requests: usize,
    pub samples: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(Self::B1, self.t as f64);
        let c2 = 1.0 - libm::pow(Self::B2, self.t as f64);
        let step = self.lr * sqrt(c2) / c1;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= step * self.m[i] / (sqrt(self.v[i]) + Self::EPS);
        }
    }
}

/// Trains `model` in place on `examples`, then rounds the parameters to
/// `f32` so a saved checkpoint reloads to exactly this model. Aborts with
/// [`Error::Diverged`] on a non-finite loss or gradient.
pub fn train(model: &mut Model, examples: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let samples: usize = examples.iter().map(|e| e.features.candidates.len()).sum();
    if samples == 0 {
        return Err(Error::Invalid("no training samples".into()));
    }
    let n = model.params.len();
    let mut adam = Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr: cfg.learning_rate };
    let mut grad = vec![0.0; n];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport { epochs: Vec::new(), requests: examples.len(), samples };
    let weights = cfg.weights();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let l = model.loss_over(chunk.iter().map(|&i| &examples[i]), weights, Some(&mut grad));
            if l.samples == 0 {
                continue;
            }
            if !l.total.is_finite() {
                return Err(Error::Diverged { epoch, step: steps, what: format!("loss is {}", l.total) });
            }
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step: steps, what: format!("gradient of parameter {i} is not finite") });
            }
            adam.step(&mut model.params, &grad);
            let w = l.samples as f64;
            acc.value += l.value * w;
            acc.calibration += l.calibration * w;
            acc.diversity += l.diversity * w;
            acc.total += l.total * w;
            acc.samples += l.samples;
            acc.clamps += l.clamps;
            steps += 1;
        }
        let s = acc.samples.max(1) as f64;
        acc.value /= s;
        acc.calibration /= s;
        acc.diversity /= s;
        acc.total /= s;
        report.epochs.push(EpochStats { epoch, steps, loss: acc });
    }
    model.quantize();
    Ok(report)
}
