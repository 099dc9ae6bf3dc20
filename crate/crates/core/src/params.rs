//! Named parameter tensors with gradient slots and Adam state.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// First moment estimate.
    pub m: Tensor<T>,
    /// Second moment estimate.
    pub v: Tensor<T>,
    /// Buffers such as batchnorm running statistics are not optimized.
    pub trainable: bool,
}

impl<T: Real> Entry<T> {
    fn new(value: Tensor<T>, trainable: bool) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            trainable,
        }
    }
}

/// Ordered parameter map. Iteration order is by name, which keeps optimizer
/// updates and serialization stable.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Entry<T>>,
    step: u64,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.insert_entry(name, Entry::new(value, true))
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.insert_entry(name, Entry::new(value, false))
    }

    pub fn insert_entry(&mut self, name: &str, entry: Entry<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let shape = entry.value.shape();
        if entry.grad.shape() != shape || entry.m.shape() != shape || entry.v.shape() != shape {
            return Err(Error::shape(
                "parameter",
                format!("slots of `{name}` disagree with {shape:?}"),
            ));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    /// Glorot-uniform weights: U(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-a..a)))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut Entry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        Ok(&mut self.entry_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.grad)
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.entry(name)?.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let entry = self.entry_mut(name)?;
        if entry.grad.shape() != grad.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("`{name}` {:?} vs {:?}", entry.grad.shape(), grad.shape()),
            ));
        }
        entry.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(T::zero());
        }
    }

    /// Copies batchnorm running statistics produced by a train-mode forward.
    pub fn apply_running_updates(
        &mut self,
        updates: Vec<crate::autodiff::RunningUpdate<T>>,
    ) -> Result<()> {
        for u in updates {
            *self.value_mut(&format!("{}.running_mean", u.prefix))? = u.stats.mean;
            *self.value_mut(&format!("{}.running_var", u.prefix))? = u.stats.var;
        }
        Ok(())
    }

    /// Sum of squared gradient entries over trainable parameters.
    pub fn grad_norm_sq(&self) -> f64 {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// One bias-corrected Adam update over every trainable entry.
///
/// Gradients are left in place; callers zero them between steps.
pub fn adam_step<T: Real>(store: &mut ParameterStore<T>, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    for (name, e) in &store.entries {
        if e.trainable && !e.grad.all_finite() {
            return Err(Error::NonFinite {
                op: format!("adam gradient of `{name}`"),
            });
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.epsilon));
    for e in store.entries.values_mut().filter(|e| e.trainable) {
        let Entry {
            value, grad, m, v, ..
        } = e;
        for (((p, &g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::from_f64([values.len()], values).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut s = store_with(&[1.0, -2.0, 3.0]);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("p").unwrap().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(&[0.0, 0.0]);
        s.accumulate_grad("p", &Tensor::from_f64([2], &[1.0, 1.0]).unwrap())
            .unwrap();
        let cfg = AdamConfig::default();
        adam_step(&mut s, &cfg).unwrap();
        // m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps).
        let expected = -1e-4 / (1.0 + 1e-8);
        for &p in s.value("p").unwrap().data() {
            assert!((p - expected).abs() < 1e-18);
            assert!((p + 1e-4).abs() < 1e-11);
        }
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut s = store_with(&[0.5, 0.5]);
        s.insert("q", Tensor::from_f64([1], &[0.5]).unwrap())
            .unwrap();
        for _ in 0..3 {
            s.accumulate_grad("p", &Tensor::from_f64([2], &[0.3, 0.3]).unwrap())
                .unwrap();
            s.accumulate_grad("q", &Tensor::from_f64([1], &[0.3]).unwrap())
                .unwrap();
            adam_step(&mut s, &AdamConfig::default()).unwrap();
            s.zero_grad();
        }
        let p = s.value("p").unwrap().data();
        assert_eq!(p[0], p[1]);
        assert_eq!(p[0], s.value("q").unwrap().data()[0]);
    }

    #[test]
    fn buffers_are_not_optimized() {
        let mut s = store_with(&[1.0]);
        s.insert_buffer("b", Tensor::from_f64([1], &[7.0]).unwrap())
            .unwrap();
        s.accumulate_grad("b", &Tensor::from_f64([1], &[1.0]).unwrap())
            .unwrap();
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("b").unwrap().data(), &[7.0]);
    }

    #[test]
    fn duplicate_and_unknown_names() {
        let mut s = store_with(&[1.0]);
        assert!(matches!(
            s.insert("p", Tensor::zeros(vec![1])),
            Err(Error::DuplicateParam(_))
        ));
        assert!(matches!(s.value("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = store_with(&[1.0]);
        s.accumulate_grad("p", &Tensor::from_f64([1], &[f64::NAN]).unwrap())
            .unwrap();
        assert!(adam_step(&mut s, &AdamConfig::default()).is_err());
        assert!(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
    }
}
