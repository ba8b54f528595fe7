//! Named parameter storage and the Adam update.
//!
//! Parameters live in a `BTreeMap` so every iteration over them is in name
//! order; combined with a seeded RNG this makes training bit-reproducible.

use std::collections::BTreeMap;

use rand::Rng;

use super::tape::{NodeId, Tape};
use super::tensor::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }

    fn validate(&self) -> Result<(), TensorError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TensorError::Argument(format!(
                "adam: learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TensorError::Argument(format!(
                    "adam: {name} = {b} outside [0, 1)"
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(TensorError::Argument(format!(
                "adam: epsilon {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// All trainable tensors of a model plus their Adam moment estimates.
#[derive(Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        if self.slots.contains_key(name) {
            return Err(TensorError::Usage(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let m = Tensor::zeros(value.shape().to_vec());
        let v = Tensor::zeros(value.shape().to_vec());
        self.slots.insert(name.to_string(), Slot { value, m, v });
        Ok(())
    }

    /// Registers a tensor initialized uniformly in (-s, s), s = 1/sqrt(fan_in).
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<(), TensorError> {
        if fan_in == 0 {
            return Err(TensorError::Argument(format!(
                "parameter {name:?}: fan_in must be positive"
            )));
        }
        let s = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// False once any parameter has gone NaN or infinite.
    pub fn all_finite(&self) -> bool {
        self.slots.values().all(|s| s.value.all_finite())
    }

    /// Completed Adam steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Records every parameter on a tape, in name order. The returned map is
    /// what forward passes use to look up their weights.
    pub fn bind(&self, tape: &mut Tape) -> Result<BTreeMap<String, NodeId>, TensorError> {
        let mut ids = BTreeMap::new();
        for (name, slot) in &self.slots {
            ids.insert(name.clone(), tape.param(name, slot.value.clone())?);
        }
        Ok(ids)
    }

    /// Clones the current parameter values, e.g. for best-epoch snapshots.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.value.clone()))
            .collect()
    }

    /// One Adam update. `grads` must cover exactly the stored parameters with
    /// matching shapes; partial updates are a bug, not a feature.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<(), TensorError> {
        cfg.validate()?;
        if grads.len() != self.slots.len() {
            return Err(TensorError::Usage(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                self.slots.len()
            )));
        }
        for (name, slot) in &self.slots {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::Usage(format!("adam: missing gradient for {name:?}")))?;
            if g.shape() != slot.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    left: slot.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, slot) in self.slots.iter_mut() {
            let g = &grads[name];
            for i in 0..g.len() {
                let gi = g.data()[i];
                let m = &mut slot.m.data_mut()[i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                let mhat = *m / bias1;
                let v = &mut slot.v.data_mut()[i];
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let vhat = *v / bias2;
                slot.value.data_mut()[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_store() -> ParamStore {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![1], vec![0.0]).unwrap())
            .unwrap();
        store
    }

    fn unit_grad(g: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::new(vec![1], vec![g]).unwrap());
        m
    }

    #[test]
    fn first_step_moves_by_almost_learning_rate() {
        // With zero moments, bias correction gives mhat = g and vhat = g^2,
        // so the first step is lr * g / (|g| + eps).
        let mut store = unit_store();
        store
            .adam_step(&unit_grad(3.0), &AdamConfig::default())
            .unwrap();
        let expected = -0.001 * 3.0 / (3.0 + 1e-8);
        assert!((store.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_keeps_unit_ratio() {
        // A constant gradient keeps mhat = g and vhat = g^2 at every step.
        let mut store = unit_store();
        for _ in 0..3 {
            store
                .adam_step(&unit_grad(2.0), &AdamConfig::default())
                .unwrap();
        }
        let expected = -3.0 * 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((store.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
        assert_eq!(store.steps(), 3);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut store = unit_store();
        let cfg = AdamConfig::with_learning_rate(0.0);
        for _ in 0..5 {
            store.adam_step(&unit_grad(1.0), &cfg).unwrap();
        }
        assert_eq!(store.get("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn gradient_coverage_is_checked() {
        let mut store = unit_store();
        store
            .insert("b", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        // Missing one parameter.
        assert!(store
            .adam_step(&unit_grad(1.0), &AdamConfig::default())
            .is_err());
        // Wrong shape.
        let mut g = unit_grad(1.0);
        g.insert("b".to_string(), Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(store.adam_step(&g, &AdamConfig::default()).is_err());
    }

    #[test]
    fn init_uniform_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        store
            .init_uniform("w", vec![4, 16], 16, &mut rng)
            .unwrap();
        let s = 1.0 / 4.0;
        let w = store.get("w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() < s));
        // Same seed reproduces the same tensor.
        let mut store2 = ParamStore::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        store2
            .init_uniform("w", vec![4, 16], 16, &mut rng2)
            .unwrap();
        assert_eq!(store2.get("w").unwrap(), w);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = unit_store();
        assert!(store.insert("w", Tensor::zeros(vec![1])).is_err());
    }
}
