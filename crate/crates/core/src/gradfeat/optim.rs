use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer, schedule and batching for one training phase. Missing fields
/// in a config file take the [`TrainConfig::adam`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f32,
    /// The learning rate is multiplied by `lr_factor` every `lr_period`
    /// iterations.
    pub lr_period: usize,
    pub lr_factor: f32,
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::adam()
    }
}

impl TrainConfig {
    /// Adam, lr 1e-3 halved every 20k of 80k iterations, batch 64,
    /// betas (0.5, 0.999), weight decay 1e-6.
    pub fn adam() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            lr_period: 20_000,
            lr_factor: 0.5,
            batch_size: 64,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.9,
            weight_decay: 1e-6,
            iterations: 80_000,
            seed: 0,
        }
    }

    /// SGD with momentum 0.9 and weight decay 5e-5 on the same schedule.
    pub fn sgd() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            weight_decay: 5e-5,
            ..Self::adam()
        }
    }

    /// Same schedule shape compressed to `iterations` (period = a quarter).
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self.lr_period = (iterations / 4).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be a finite non-negative number");
        }
        if self.lr_period == 0 {
            return bad("lr_period must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("lr_factor must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight decay must be non-negative and adam_eps positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f32 {
        self.lr * self.lr_factor.powi((iteration / self.lr_period) as i32)
    }
}

/// Stateful optimizer over a fixed, ordered list of tensors. Weight decay
/// is added to the gradient before the update.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: TrainConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `cfg.lr_at(steps)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::State("optimizer got mismatched parameter and gradient lists".into()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if self.cfg.optimizer == OptimizerKind::Adam {
                self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            }
        }
        if self.first.len() != params.len()
            || params.iter().zip(&self.first).any(|(p, m)| p.numel() != m.len())
        {
            return Err(Error::State("optimizer parameter layout changed between steps".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let lr = self.cfg.lr_at(self.steps as usize);
        self.steps += 1;
        let wd = self.cfg.weight_decay;
        match self.cfg.optimizer {
            OptimizerKind::Adam => {
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gj = gj + wd * *w;
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.adam_eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = self.cfg.momentum;
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let buf = &mut self.first[i];
                    for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gj = gj + wd * *w;
                        buf[j] = mu * buf[j] + gj;
                        *w -= lr * buf[j];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves() {
        let cfg = TrainConfig::adam();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(19_999), 1e-3);
        assert_eq!(cfg.lr_at(20_000), 5e-4);
        assert_eq!(cfg.lr_at(79_999), 1.25e-4);
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        let mut cfg = TrainConfig::sgd();
        cfg.lr = 0.1;
        cfg.weight_decay = 0.0;
        let mut opt = Optimizer::new(&cfg).unwrap();
        let mut w = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        opt.step(&mut [&mut w], &[&g]).unwrap();
        assert_eq!(w.data(), &[0.95, -1.05]);
        opt.step(&mut [&mut w], &[&g]).unwrap();
        // buffer = 0.9 * 0.5 + 0.5
        assert!((w.data()[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut opt = Optimizer::new(&TrainConfig { weight_decay: 0.0, ..TrainConfig::adam() }).unwrap();
        let mut w = Tensor::zeros(&[3]);
        let g = Tensor::new(vec![3], vec![2.0, -0.1, 0.0]).unwrap();
        opt.step(&mut [&mut w], &[&g]).unwrap();
        assert!((w.data()[0] + 1e-3).abs() < 1e-8);
        assert!((w.data()[1] - 1e-3).abs() < 1e-8);
        assert_eq!(w.data()[2], 0.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, ..TrainConfig::sgd() };
        let mut opt = Optimizer::new(&cfg).unwrap();
        let mut w = Tensor::full(&[4], 3.0);
        opt.step(&mut [&mut w], &[&Tensor::full(&[4], 1.0)]).unwrap();
        assert_eq!(w, Tensor::full(&[4], 3.0));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::adam() }.validate().is_err());
        assert!(TrainConfig { lr_period: 0, ..TrainConfig::adam() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::adam() }.validate().is_err());
    }
}
