//! AdamW with global-norm clipping and a warmup/cosine learning-rate schedule.

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub final_lr_ratio: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.0,
            warmup_steps: 50,
            final_lr_ratio: 0.1,
            clip_norm: 1.0,
        }
    }
}

pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    cfg: OptimConfig,
    total_steps: usize,
    step: usize,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, cfg: &OptimConfig, total_steps: usize) -> Result<Self> {
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            opt,
            vars,
            cfg: cfg.clone(),
            total_steps: total_steps.max(1),
            step: 0,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.cfg.lr;
        if step < self.cfg.warmup_steps {
            return base * (step + 1) as f64 / self.cfg.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.cfg.warmup_steps).max(1);
        let progress = ((step - self.cfg.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = base * self.cfg.final_lr_ratio;
        floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Backpropagates `loss` and applies one update. Returns the loss value.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {value} at step {}",
                self.step
            )));
        }
        let mut grads = loss.backward()?;
        if self.cfg.clip_norm > 0.0 {
            let mut sq = 0f64;
            for v in &self.vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    sq += g
                        .sqr()?
                        .sum_all()?
                        .to_dtype(candle_core::DType::F64)?
                        .to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient norm at step {}",
                    self.step
                )));
            }
            if norm > self.cfg.clip_norm {
                let scale = self.cfg.clip_norm / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.opt.set_learning_rate(self.lr_at(self.step));
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(value)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn minimises_a_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        let cfg = OptimConfig {
            lr: 0.1,
            warmup_steps: 1,
            ..Default::default()
        };
        let mut t = Trainer::new(vec![x.clone()], &cfg, 500).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            t.step(&loss).unwrap();
        }
        let v = x.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn nan_loss_is_an_error() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f32], &Device::Cpu).unwrap()).unwrap();
        let mut t = Trainer::new(vec![x.clone()], &OptimConfig::default(), 10).unwrap();
        let loss = (x.as_tensor().sum_all().unwrap() * f64::NAN).unwrap();
        assert!(matches!(t.step(&loss), Err(Error::Numerical(_))));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f32], &Device::Cpu).unwrap()).unwrap();
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_steps: 10,
            final_lr_ratio: 0.1,
            ..Default::default()
        };
        let t = Trainer::new(vec![x], &cfg, 110).unwrap();
        assert!((t.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((t.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((t.lr_at(110) - 0.1).abs() < 1e-12);
        assert!(t.lr_at(50) < t.lr_at(20));
    }
}
