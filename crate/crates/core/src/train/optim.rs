//! Adam with L2 weight decay folded into the gradient.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", config.lr)));
        }
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            config,
            vars,
            m,
            v,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// First and second moments, named like the parameters.
    pub fn moments(&self) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
        let named = |ts: &[Tensor]| {
            self.vars
                .iter()
                .zip(ts)
                .map(|((n, _), t)| (n.clone(), t.clone()))
                .collect()
        };
        (named(&self.m), named(&self.v))
    }

    pub fn set_moments(
        &mut self,
        m: &std::collections::BTreeMap<String, Tensor>,
        v: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let (Some(mi), Some(vi)) = (m.get(name), v.get(name)) else {
                return Err(Error::Checkpoint(format!("missing optimizer moments for {name}")));
            };
            for t in [mi, vi] {
                if t.dims() != var.dims() {
                    return Err(Error::shape("optimizer moment", var.dims(), t.dims()));
                }
            }
            self.m[i] = mi.to_dtype(var.dtype())?;
            self.v[i] = vi.to_dtype(var.dtype())?;
        }
        Ok(())
    }

    /// Scales gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&self, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = total.sqrt();
        if norm > max_norm {
            let scale = max_norm / (norm + 1e-6);
            for (_, var) in &self.vars {
                if let Some(g) = grads.remove(var.as_tensor()) {
                    grads.insert(var.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(norm)
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let step_size = c.lr / (1.0 - c.beta1.powi(t));
        let bias2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let p = var.as_tensor().detach();
            let g = if c.weight_decay != 0.0 {
                (g + (&p * c.weight_decay)?)?
            } else {
                g
            };
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let denom = ((v.sqrt()? / bias2_sqrt)? + c.eps)?;
            var.set(&(p - ((&m / denom)? * step_size)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 3.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("w".into(), var.clone())], AdamConfig::new(0.1, 0.0)).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let w = var.as_tensor().to_vec1::<f64>().unwrap();
        for (a, b) in w.iter().zip([0.9, -1.9, 2.9]) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_lr_leaves_weights_bitwise() {
        let var = Var::from_tensor(&Tensor::new(&[0.25f32, -1.5], &Device::Cpu).unwrap()).unwrap();
        let before = var.as_tensor().to_vec1::<f32>().unwrap();
        let mut opt = Adam::new(vec![("w".into(), var.clone())], AdamConfig::new(0.0, 1e-5)).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(before, var.as_tensor().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn weight_decay_matches_l2_gradient() {
        // Two steps on a zero-gradient objective still shrink the weight.
        let var = Var::from_tensor(&Tensor::new(&[2.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("w".into(), var.clone())], AdamConfig::new(0.01, 0.5)).unwrap();
        let w = var.as_tensor();
        let loss = (w - w.detach()).unwrap().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let w = var.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((w - 1.99).abs() < 1e-9, "{w}");
    }

    #[test]
    fn negative_lr_rejected() {
        let var = Var::zeros(2, DType::F32, &Device::Cpu).unwrap();
        assert!(Adam::new(vec![("w".into(), var)], AdamConfig::new(-1.0, 0.0)).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let var = Var::from_tensor(&Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap()).unwrap();
        let opt = Adam::new(vec![("w".into(), var.clone())], AdamConfig::new(0.1, 0.0)).unwrap();
        let loss = (var.as_tensor().sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
        let mut grads = loss.backward().unwrap();
        let norm = opt.clip_grad_norm(&mut grads, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let g = grads.get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-6);
    }
}
