//! Named trainable tensors.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dotted-path map of trainable leaves, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        t.set_requires_grad(true);
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Copies values for every name present in both stores.
    pub fn load_values(&mut self, other: &ParameterStore<S>) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if dst.shape() != t.shape() {
                return Err(Error::dim("load_values", dst.shape(), t.shape()));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> S {
        self.tensors
            .values()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter().map(|&x| x * x))
            .sum::<S>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: S) -> S {
        let norm = self.grad_norm();
        if norm > max_norm && norm > S::zero() {
            let c = max_norm / norm;
            for t in self.tensors.values_mut() {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|x| *x *= c);
                }
            }
        }
        norm
    }

    /// Discards the gradients of parameters whose name starts with `prefix`,
    /// so optimizers leave them unchanged this step.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.drop_grad();
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
pub fn init_linear<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Normal(0, std²) initialisation.
pub fn init_normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    Tensor::<S>::randn(shape, rng).map(|x| x * S::lit(std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("b.w", Tensor::zeros(&[1])).unwrap();
        store.insert("a.w", Tensor::zeros(&[1])).unwrap();
        assert!(store.insert("a.w", Tensor::zeros(&[1])).is_err());
        let names: Vec<_> = store.names().cloned().collect();
        assert_eq!(names, ["a.w", "b.w"]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::zeros(&[2])).unwrap();
        store.get_mut("w").unwrap().accumulate_grad(&[3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
