//! AdamW with decoupled weight decay, global-norm clipping, and the
//! warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Per-parameter Adam state.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn restore(config: AdamWConfig, state: BTreeMap<String, Moments>) -> Self {
        Self { config, state }
    }

    /// Global L2 norm of the gradients of `params`.
    pub fn grad_norm<'a>(params: impl IntoIterator<Item = &'a Param>, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0f64;
        for p in params {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update of every parameter in `params` that received a gradient.
    /// Gradients are multiplied by `grad_scale` first (clipping).
    /// Weight decay applies to matrices only, not to biases and norms.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a Param>, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        let c = self.config;
        for p in params {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            let g = (g * grad_scale)?;
            let entry = match self.state.entry(p.name.clone()) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => e.insert(Moments {
                    m: p.var.zeros_like()?,
                    v: p.var.zeros_like()?,
                    steps: 0,
                }),
            };
            entry.steps += 1;
            entry.m = ((&entry.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            entry.v = ((&entry.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let t = entry.steps as i32;
            let m_hat = (&entry.m / (1.0 - c.beta1.powi(t)))?;
            let v_hat = (&entry.v / (1.0 - c.beta2.powi(t)))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let mut next = (p.var.as_tensor() - (update * lr)?)?;
            if p.var.rank() >= 2 && c.weight_decay > 0.0 {
                next = (next - (p.var.as_tensor() * (lr * c.weight_decay))?)?;
            }
            p.var.set(&next)?;
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup_steps`, cosine decay to 0 at
/// `total_steps`. Steps are 1-based: `step` is the update being taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 || warmup_steps > total_steps || !(peak > 0.0) {
            return Err(Error::Config(format!(
                "bad lr schedule: peak {peak}, warmup {warmup_steps}, total {total_steps}"
            )));
        }
        Ok(Self { peak, warmup_steps, total_steps })
    }

    pub fn at(&self, step: u64) -> f64 {
        let step = step.clamp(1, self.total_steps);
        if step <= self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;
    use candle_core::{Device, Var};

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(1e-3, 10, 100).unwrap();
        assert!((s.at(1) - 1e-4).abs() < 1e-15);
        assert_eq!(s.at(10), 1e-3);
        assert!(s.at(100).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for t in 10..=100 {
            assert!(s.at(t) <= prev);
            prev = s.at(t);
        }
        assert!(LrSchedule::new(1e-3, 0, 0).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first Adam update is lr * sign(g).
        let var = Var::from_tensor(&Tensor::new(&[[1f32, -2.0]], &Device::Cpu).unwrap()).unwrap();
        let p = Param { name: "w".into(), group: ParamGroup::VideoStem, var: var.clone() };
        let loss = (var.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step([&p], &grads, 0.1, 1.0).unwrap();
        let got: Vec<f32> = var.flatten_all().unwrap().to_vec1().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] + 2.1).abs() < 1e-6);
        assert_eq!(opt.state()["w"].steps, 1);
    }

    #[test]
    fn decay_skips_vectors() {
        let v = Var::from_tensor(&Tensor::new(&[1f32, 1.0], &Device::Cpu).unwrap()).unwrap();
        let p = Param { name: "b".into(), group: ParamGroup::VideoStem, var: v.clone() };
        let loss = (v.as_tensor() * 0.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
        opt.step([&p], &grads, 0.1, 1.0).unwrap();
        let got: Vec<f32> = v.to_vec1().unwrap();
        // zero gradient: Adam update is 0, and vectors receive no decay
        assert_eq!(got, vec![1.0, 1.0]);
    }
}
