//! Classical-momentum SGD and Adam with learning-rate schedules.

use serde::{Deserialize, Serialize};

use ctxnorm::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `factor` once progress passes each fraction.
    StepDecay { fractions: Vec<f64>, factor: f64 },
    /// Half-cosine from the base rate down to zero.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr: 0.05,
            schedule: Schedule::Constant,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be a non-negative number", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum and Adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} is negative", self.weight_decay)));
        }
        if let Schedule::StepDecay { fractions, factor } = &self.schedule {
            if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || !(*factor > 0.0) {
                return Err(Error::Config("step decay needs fractions in [0, 1] and a positive factor".into()));
            }
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let progress = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        match &self.schedule {
            Schedule::Constant => self.lr,
            Schedule::StepDecay { fractions, factor } => {
                self.lr * factor.powi(fractions.iter().filter(|&&f| progress >= f).count() as i32)
            }
            Schedule::Cosine => 0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    pub steps: u64,
    /// Planned number of steps, for the schedule.
    pub total_steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, first: Vec::new(), second: Vec::new(), steps: 0, total_steps })
    }

    /// Applies one update. `params` pairs each tensor with whether weight
    /// decay applies to it; `grads` follows the same order.
    pub fn step(&mut self, params: Vec<(&mut Tensor, bool)>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        let cfg = &self.config;
        let lr = cfg.lr_at(self.steps, self.total_steps);
        self.steps += 1;
        let t = self.steps as i32;
        for (i, ((param, decay), grad)) in params.into_iter().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!("parameter {i} is {:?}, gradient {:?}", param.shape(), grad.shape())));
            }
            let wd = if decay { cfg.weight_decay } else { 0.0 };
            let m = &mut self.first[i];
            match cfg.kind {
                OptimizerKind::SgdMomentum => {
                    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()) {
                        *v = cfg.momentum * *v + g + wd * *p;
                        *p -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let s = &mut self.second[i];
                    let c1 = 1.0 - cfg.beta1.powi(t);
                    let c2 = 1.0 - cfg.beta2.powi(t);
                    for (((p, &g), m1), m2) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let g = g + wd * *p;
                        *m1 = cfg.beta1 * *m1 + (1.0 - cfg.beta1) * g;
                        *m2 = cfg.beta2 * *m2 + (1.0 - cfg.beta2) * g * g;
                        *p -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + cfg.adam_eps);
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
    fn schedules() {
        let mut cfg = OptimizerConfig { lr: 1.0, ..Default::default() };
        assert_eq!(cfg.lr_at(70, 100), 1.0);
        cfg.schedule = Schedule::StepDecay { fractions: vec![0.5, 0.75], factor: 0.1 };
        assert_eq!(cfg.lr_at(49, 100), 1.0);
        assert!((cfg.lr_at(50, 100) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(80, 100) - 0.01).abs() < 1e-15);
        cfg.schedule = Schedule::Cosine;
        assert_eq!(cfg.lr_at(0, 10), 1.0);
        assert!((cfg.lr_at(5, 10) - 0.5).abs() < 1e-15);
        assert!(cfg.lr_at(10, 10).abs() < 1e-15);
    }

    #[test]
    fn first_sgd_step_is_plain_gradient_descent() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }, 10).unwrap();
        opt.step(vec![(&mut p, true)], std::slice::from_ref(&g)).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
        // Momentum carries the previous velocity.
        opt.step(vec![(&mut p, true)], std::slice::from_ref(&g)).unwrap();
        assert!((p.data()[0] - (0.95 - 0.1 * (0.9 * 0.5 + 0.5))).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let mut p = Tensor::from_vec(&[1], vec![3.0]).unwrap();
            let mut opt = Optimizer::new(OptimizerConfig { kind, lr: 0.0, ..Default::default() }, 1).unwrap();
            opt.step(vec![(&mut p, true)], &[Tensor::ones(&[1])]).unwrap();
            assert_eq!(p.data(), &[3.0]);
        }
    }

    #[test]
    fn adam_first_step_has_rate_magnitude() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::from_vec(&[2], vec![4.0, -0.01]).unwrap();
        let mut opt = Optimizer::new(
            OptimizerConfig { kind: OptimizerKind::Adam, lr: 0.01, weight_decay: 0.0, ..Default::default() },
            1,
        )
        .unwrap();
        opt.step(vec![(&mut p, false)], &[g]).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
    }
}
