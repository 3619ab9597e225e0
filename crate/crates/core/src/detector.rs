//! Running Gaussian model of the training loss and the soft task-boundary
//! signal derived from it.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub alpha: f64,
    /// Observations before `D` is reported; during warmup `D` is 0.
    pub warmup: u64,
    /// Variance assigned when the first loss is observed.
    pub var_init: f64,
    pub var_floor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { alpha: 0.1, warmup: 10, var_init: 1e-4, var_floor: 1e-8 }
    }
}

/// Result of scoring one loss against the statistics before updating them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub distance: f64,
    pub log_prob: f64,
    pub boundary: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStats {
    pub mu: f64,
    pub var: f64,
    pub count: u64,
    pub config: DetectorConfig,
}

impl LossStats {
    pub fn new(config: DetectorConfig) -> Self {
        Self { mu: 0.0, var: config.var_init, count: 0, config }
    }

    /// Statistics with explicit moments, already past warmup.
    pub fn with_moments(mu: f64, var: f64, alpha: f64) -> Self {
        let config = DetectorConfig { alpha, ..DetectorConfig::default() };
        Self { mu, var: var.max(config.var_floor), count: config.warmup, config }
    }

    pub fn is_warm(&self) -> bool {
        self.count >= self.config.warmup && self.count > 0
    }

    /// `(loss - mu)² / var`, or 0 while warming up.
    pub fn mahalanobis(&self, loss: f64) -> f64 {
        if !self.is_warm() {
            return 0.0;
        }
        let d = loss - self.mu;
        d * d / self.var
    }

    /// `D/2 + log(sigma·sqrt(2π))`.
    pub fn log_new_task_prob(&self, loss: f64) -> f64 {
        0.5 * self.mahalanobis(loss) + (self.var.sqrt() * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }

    /// Low-pass update of both moments, each using the mean from before the
    /// update. The variance recursion has no decay term, so it never shrinks.
    pub fn update(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} fed to boundary detector")));
        }
        if self.count == 0 {
            self.mu = loss;
            self.var = self.config.var_init.max(self.config.var_floor);
        } else {
            let a = self.config.alpha;
            let diff = loss - self.mu;
            self.mu += a * diff;
            self.var = (self.var + a * diff * diff).max(self.config.var_floor);
        }
        self.count += 1;
        Ok(())
    }

    /// Scores `loss` against the current statistics, then folds it in.
    pub fn observe(&mut self, loss: f64) -> Result<Observation> {
        let distance = self.mahalanobis(loss);
        let log_prob = self.log_new_task_prob(loss);
        self.update(loss)?;
        Ok(Observation { distance, log_prob, boundary: is_boundary(distance) })
    }
}

pub fn is_boundary(distance: f64) -> bool {
    distance > 1.0
}
