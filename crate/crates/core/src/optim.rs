//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::Config {
                field: format!("{section}.{field}"),
                msg: msg.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must be in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("eps", "must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Updates every trainable parameter from `grads[i]`, the gradient of
    /// parameter `i`. Frozen parameters are never touched.
    pub fn step<T: Real>(&mut self, params: &mut ModelParams<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("adamw", "one gradient slot per parameter expected"));
        }
        if self.m.is_empty() {
            self.m = params.params().iter().map(|p| vec![0.0; if p.trainable { p.value.len() } else { 0 }]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.param_mut(i);
            let Some(g) = g.as_ref().filter(|_| p.trainable) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64().unwrap();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                let wf = w.to_f64().unwrap();
                *w = T::lit(wf - c.lr * (update + c.weight_decay * wf));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Param;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Bias correction makes the first update exactly lr·g/(|g|+eps).
        let mut p = ModelParams::from_params(vec![
            Param { name: "w".into(), value: Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap(), trainable: true },
            Param { name: "f".into(), value: Tensor::new(vec![1], vec![3.0f64]).unwrap(), trainable: false },
        ]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, eps: 0.0, ..AdamWConfig::default() });
        opt.step(&mut p, &[Some(vec![0.5, -2.0]), Some(vec![9.0])]).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-12);
        assert!((p.get("w").unwrap().data()[1] + 0.9).abs() < 1e-12);
        assert_eq!(p.get("f").unwrap().data(), &[3.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut p = ModelParams::from_params(vec![Param {
            name: "w".into(),
            value: Tensor::new(vec![1], vec![2.0f64]).unwrap(),
            trainable: true,
        }]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..AdamWConfig::default() });
        opt.step(&mut p, &[Some(vec![0.0])]).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ModelParams::from_params(vec![Param {
            name: "w".into(),
            value: Tensor::new(vec![1], vec![5.0f64]).unwrap(),
            trainable: true,
        }]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..AdamWConfig::default() });
        for _ in 0..500 {
            let w = p.get("w").unwrap().data()[0];
            opt.step(&mut p, &[Some(vec![2.0 * (w - 1.0)])]).unwrap();
        }
        assert!((p.get("w").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }
}
