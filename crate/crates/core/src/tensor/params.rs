use std::collections::BTreeMap;

use rand::Rng;

use super::{graph::BnUpdate, Gradients, Tensor, BN_MOMENTUM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Buffers such as running statistics are not trainable.
    pub trainable: bool,
}

/// Named tensors with gradient slots, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad, trainable });
    }

    /// Dense layer `{prefix}.weight` (fan_in×fan_out) and `{prefix}.bias`
    /// (1×fan_out), uniform in ±1/√fan_in with a zero bias.
    pub fn insert_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape");
        self.insert(&format!("{prefix}.weight"), weight, true);
        self.insert(&format!("{prefix}.bias"), Tensor::zeros(&[1, fan_out]), true);
    }

    /// Dense layer with all-zero weight and bias.
    pub fn insert_linear_zeroed(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.insert(&format!("{prefix}.weight"), Tensor::zeros(&[fan_in, fan_out]), true);
        self.insert(&format!("{prefix}.bias"), Tensor::zeros(&[1, fan_out]), true);
    }

    pub fn insert_batch_norm(&mut self, prefix: &str, channels: usize) {
        self.insert(&format!("{prefix}.gamma"), Tensor::full(&[1, channels], 1.0), true);
        self.insert(&format!("{prefix}.beta"), Tensor::zeros(&[1, channels]), true);
        self.insert(&format!("{prefix}.running_mean"), Tensor::zeros(&[1, channels]), false);
        self.insert(&format!("{prefix}.running_var"), Tensor::full(&[1, channels], 1.0), false);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "tensor {name}: expected shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if p.grad.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient for {name} has shape {:?}", g.shape())));
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Folds batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let p = self.get_mut(&format!("{}.{suffix}", u.prefix))?;
                for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        self.round_to_f32();
        Ok(())
    }

    /// Rounds every stored value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.params {
            let q = other
                .params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if p.value.shape() != q.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected shape {:?}, got {:?}",
                    p.value.shape(),
                    q.value.shape()
                )));
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Shape(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}
