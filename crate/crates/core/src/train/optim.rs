use serde::{Deserialize, Serialize};

use crate::error::{KpxError, Result};
use crate::tensor::{ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub decay_epochs: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Forward passes per optimizer step.
    pub accumulation: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.1,
            decay_epochs: 60.0,
            epochs: 30,
            steps_per_epoch: 50,
            accumulation: 2,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.beta1, self.beta2, self.eps, self.decay_factor, self.decay_epochs];
        if positive.iter().any(|&v| !(v > 0.0)) || self.weight_decay < 0.0 {
            return Err(KpxError::Config("optimizer rates must be positive".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(KpxError::Config("Adam betas must be below 1".into()));
        }
        if self.accumulation == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(KpxError::Config("epochs, steps and accumulation must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr · decay_factor^(epoch / decay_epochs)`.
pub fn lr_schedule(epoch: f64, cfg: &OptimizerConfig) -> f64 {
    cfg.lr * cfg.decay_factor.powf(epoch / cfg.decay_epochs)
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
    cfg: OptimizerConfig,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: OptimizerConfig) -> Self {
        let zeros = |_| Vec::new();
        AdamW {
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
            t: 0,
            cfg,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update with learning rate `lr`. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(KpxError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if m.is_empty() {
                m.resize(p.value.len(), T::zero());
                v.resize(p.value.len(), T::zero());
            }
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w *= decay;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn scalar(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", &[1], vec![v], ParamKind::Linear);
        s.get_mut(id).grad[0] = g;
        s
    }

    #[test]
    fn unit_update() {
        let mut s = scalar(1.0, 1.0);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, 0.1).unwrap();
        let p = s.iter().next().unwrap().1.value[0];
        assert!((p - 0.9).abs() < 1e-7, "{p}");
    }

    #[test]
    fn zero_gradient_and_decay() {
        let mut s = scalar(2.0, 0.0);
        let mut opt = AdamW::new(&s, OptimizerConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value[0], 2.0);
        let mut opt = AdamW::new(&s, OptimizerConfig { weight_decay: 0.5, ..Default::default() });
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.iter().next().unwrap().1.value[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut s = scalar(1.0, f64::NAN);
        let mut opt = AdamW::new(&s, OptimizerConfig::default());
        let e = opt.step(&mut s, 0.1).unwrap_err();
        assert!(e.to_string().contains("`p`"));
        assert_eq!(s.iter().next().unwrap().1.value[0], 1.0);
    }

    #[test]
    fn schedule() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_schedule(0.0, &cfg), 5e-3);
        assert!((lr_schedule(60.0, &cfg) - 5e-4).abs() < 1e-15);
        assert!((lr_schedule(30.0, &cfg) - 1.5811388300841898e-3).abs() < 1e-12);
    }
}
