//! Adam and its layer-wise trust-ratio variant (LAMB).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::policy::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam moments rescaled per parameter group by `||w|| / ||update||`.
    Lamb,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lamb" => Ok(Self::Lamb),
            "adam" => Ok(Self::Adam),
            other => Err(invalid(format!("unknown optimizer '{other}' (expected lamb or adam)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Upper bound on the LAMB trust ratio.
    pub max_trust_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip_norm: f64,
    /// Linear learning-rate warmup length in steps; 0 disables.
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Lamb,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            max_trust_ratio: 10.0,
            grad_clip_norm: 0.0,
            warmup_steps: 0,
        }
    }
}

/// First and second moments per parameter group, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<F: Scalar> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

fn norm<F: Scalar>(a: &Array2<F>) -> f64 {
    a.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(config: OptimizerConfig, params: &[Array2<F>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    fn lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w > 0 && self.step <= w {
            self.config.learning_rate * self.step as f64 / w as f64
        } else {
            self.config.learning_rate
        }
    }

    /// One update in place. Gradients are consumed.
    pub fn apply(&mut self, params: &mut [Array2<F>], mut grads: Vec<Array2<F>>) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(invalid("gradient, moment and parameter counts differ"));
        }
        let c = self.config;
        if c.grad_clip_norm > 0.0 {
            let total = grads.iter().map(|g| norm(g).powi(2)).sum::<f64>().sqrt();
            if total > c.grad_clip_norm {
                let s = F::of(c.grad_clip_norm / total);
                grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
            }
        }
        self.step += 1;
        let lr = self.lr();
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (ob1, ob2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let (ibc1, ibc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
        let (eps, wd) = (F::of(c.eps), F::of(c.weight_decay));
        for (((w, g), m), v) in params.iter_mut().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
            });
            let mut u = Array2::<F>::zeros(w.raw_dim());
            ndarray::Zip::from(&mut u).and(&*m).and(&*v).and(&*w).for_each(|u, &m, &v, &w| {
                *u = (m * ibc1) / ((v * ibc2).sqrt() + eps) + wd * w;
            });
            let scale = match c.kind {
                OptimizerKind::Adam => lr,
                OptimizerKind::Lamb => {
                    let (wn, un) = (norm(w), norm(&u));
                    let ratio = if wn > 0.0 && un > 0.0 { (wn / un).min(c.max_trust_ratio) } else { 1.0 };
                    lr * ratio
                }
            };
            let s = F::of(scale);
            ndarray::Zip::from(w).and(&u).for_each(|w, &u| *w -= s * u);
        }
        Ok(())
    }
}
