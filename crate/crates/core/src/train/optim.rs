//! AdamW with decoupled weight decay. Moments are stored at 32-bit float
//! precision like the parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// One update of every trainable parameter from its gradient slot.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            if !p.grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Shape(format!("optimizer state for {name} has the wrong shape")));
            }
            let (ms, vs) = (m.data_mut(), v.data_mut());
            for (k, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                ms[k] = f32_round(c.beta1 * ms[k] + (1.0 - c.beta1) * g);
                vs[k] = f32_round(c.beta2 * vs[k] + (1.0 - c.beta2) * g * g);
                let update = (ms[k] / bc1) / ((vs[k] / bc2).sqrt() + c.eps);
                *w = f32_round(*w - c.learning_rate * (c.weight_decay * *w + update));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::full(&[1, 1], x), true);
        s
    }

    /// Plain scalar AdamW with the same 32-bit storage of weight and moments.
    fn reference(x0: f64, grad: impl Fn(f64) -> f64, steps: usize, c: AdamWConfig) -> f64 {
        let r = |x: f64| x as f32 as f64;
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = grad(x);
            m = r(c.beta1 * m + (1.0 - c.beta1) * g);
            v = r(c.beta2 * v + (1.0 - c.beta2) * g * g);
            let mhat = m / (1.0 - c.beta1.powi(t as i32));
            let vhat = v / (1.0 - c.beta2.powi(t as i32));
            x = r(x - c.learning_rate * c.weight_decay * x - c.learning_rate * mhat / (vhat.sqrt() + c.eps));
        }
        x
    }

    #[test]
    fn matches_scalar_reference() {
        let c = AdamWConfig { learning_rate: 1e-2, ..AdamWConfig::default() };
        let grad = |x: f64| 2.0 * (x - 3.0);
        let mut store = scalar_store(0.5);
        let mut opt = AdamW::new(c).unwrap();
        for _ in 0..100 {
            store.zero_grad();
            let x = store.get("x").unwrap().value.item();
            store.get_mut("x").unwrap().grad = Tensor::full(&[1, 1], grad(x));
            opt.step(&mut store).unwrap();
        }
        let want = reference(0.5, grad, 100, c);
        let got = store.get("x").unwrap().value.item();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got > 0.5);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut store = scalar_store(0.1234f32 as f64);
        store.get_mut("x").unwrap().grad = Tensor::full(&[1, 1], 5.0);
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.0, ..AdamWConfig::default() }).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("x").unwrap().value, before.get("x").unwrap().value);
    }

    #[test]
    fn buffers_are_not_touched() {
        let mut store = scalar_store(1.0);
        store.insert("buf", Tensor::full(&[1, 1], 2.0), false);
        store.get_mut("buf").unwrap().grad = Tensor::full(&[1, 1], 1.0);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("buf").unwrap().value.item(), 2.0);
        assert!(!opt.m.contains_key("buf"));
    }

    #[test]
    fn rejects_bad_settings_and_gradients() {
        assert!(AdamW::new(AdamWConfig { beta1: 1.0, ..AdamWConfig::default() }).is_err());
        let mut store = scalar_store(1.0);
        store.get_mut("x").unwrap().grad = Tensor::full(&[1, 1], f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        assert!(matches!(opt.step(&mut store), Err(Error::Numeric(_))));
    }
}
