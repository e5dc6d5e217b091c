//! Named trainable parameters with gradient slots.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient accumulator shaped like a [`ParamStore`]. Used for per-shard
/// accumulation before a deterministic merge.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer(pub(crate) Vec<Tensor>);

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn zero(&mut self) {
        self.0.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    /// All gradient entries flattened in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    ids: Vec<String>,
    pub(crate) values: Vec<Tensor>,
    pub(crate) grads: Vec<Tensor>,
    lookup: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let id = id.into();
        if self.lookup.contains_key(&id) {
            return Err(Error::Config(format!("duplicate parameter id {id:?}")));
        }
        let index = self.ids.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.lookup.insert(id.clone(), index);
        self.ids.push(id);
        Ok(ParamId(index))
    }

    pub fn find(&self, id: &str) -> Option<ParamId> {
        self.lookup.get(id).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, p: ParamId) -> &str {
        &self.ids[p.0]
    }

    pub fn value(&self, p: ParamId) -> &Tensor {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.values[p.0]
    }

    pub fn grad(&self, p: ParamId) -> &Tensor {
        &self.grads[p.0]
    }

    pub fn grad_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.grads[p.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.ids.len()).map(ParamId)
    }

    /// Parameter ids in lexicographic order, the canonical serialization order.
    pub fn sorted(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.lookup.iter().map(|(k, &v)| (k.as_str(), ParamId(v)))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer(
            self.values
                .iter()
                .map(|v| Tensor::zeros(v.shape()))
                .collect(),
        )
    }

    pub fn accumulate(&mut self, buffer: &GradBuffer) {
        for (g, b) in self.grads.iter_mut().zip(&buffer.0) {
            g.add_assign(b);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(factor));
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    /// Copy of the current gradients.
    pub fn grads(&self) -> GradBuffer {
        GradBuffer(self.grads.clone())
    }

    /// One gradient-ascent step: `value += lr · gradient`, then zero the
    /// gradients. The trainer maximizes reward, hence the sign.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for (v, g) in self.values.iter_mut().zip(self.grads.iter_mut()) {
            for (vv, gg) in v.data_mut().iter_mut().zip(g.data_mut().iter_mut()) {
                *vv += lr * *gg;
                *gg = 0.0;
            }
        }
        Ok(())
    }

    /// Copies values from `other`, which must have identical ids and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.ids != other.ids {
            return Err(Error::Usage("parameter ids differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Usage("parameter shapes differ".into()));
            }
            a.data_mut().copy_from_slice(b.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let p = s.add("w", Tensor::scalar(value)).unwrap();
        s.grad_mut(p).data_mut()[0] = grad;
        (s, p)
    }

    #[test]
    fn sgd_ascends() {
        let (mut s, p) = store_with(1.0, 2.0);
        s.sgd_step(0.1).unwrap();
        assert!((s.value(p).data()[0] - 1.2).abs() < 1e-15);
        assert_eq!(s.grad(p).data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let (mut s, p) = store_with(1.5, 0.0);
        s.sgd_step(0.3).unwrap();
        assert_eq!(s.value(p).data()[0], 1.5);
    }

    #[test]
    fn two_small_steps_equal_one_big_step() {
        let (mut a, p) = store_with(0.25, 2.0);
        a.sgd_step(0.1).unwrap();
        a.grad_mut(p).data_mut()[0] = 2.0;
        a.sgd_step(0.1).unwrap();
        let (mut b, _) = store_with(0.25, 2.0);
        b.sgd_step(0.2).unwrap();
        assert!((a.value(p).data()[0] - b.value(p).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn step_then_negated_step_restores() {
        let (mut s, p) = store_with(0.7, 1.3);
        s.sgd_step(0.05).unwrap();
        s.grad_mut(p).data_mut()[0] = -1.3;
        s.sgd_step(0.05).unwrap();
        assert!((s.value(p).data()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let (mut s, _) = store_with(1.0, 1.0);
        assert!(matches!(s.sgd_step(0.0), Err(Error::Config(_))));
        assert!(matches!(s.sgd_step(-0.1), Err(Error::Config(_))));
    }

    #[test]
    fn ids_are_unique() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(0.0)).unwrap();
        assert!(s.add("a", Tensor::scalar(1.0)).is_err());
        let order: Vec<_> = {
            s.add("0first", Tensor::scalar(0.0)).unwrap();
            s.sorted().map(|(k, _)| k.to_string()).collect()
        };
        assert_eq!(order, vec!["0first", "a"]);
    }
}
