//! Named parameter tables and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

/// Parameters by dotted name, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Same names and shapes.
    pub fn same_layout<U: Scalar>(&self, other: &ParamStore<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}

/// Lazily places parameters on a tape, once each.
///
/// Every lookup of the same name returns the same [`Var`], so all forward
/// passes recorded through one binder share one set of leaves.
pub struct Binder<'p, T> {
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    frozen_prefixes: Vec<String>,
}

impl<'p, T: Scalar> Binder<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Binder {
            params,
            bound: BTreeMap::new(),
            trainable: true,
            frozen_prefixes: Vec::new(),
        }
    }

    /// Bind every parameter as a constant (no gradients).
    pub fn frozen(params: &'p ParamStore<T>) -> Self {
        Binder {
            trainable: false,
            ..Self::new(params)
        }
    }

    /// Parameters under these prefixes are bound as constants.
    pub fn freeze_prefix(mut self, prefix: &str) -> Self {
        self.frozen_prefixes.push(prefix.to_string());
        self
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let trainable = self.trainable && !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = if trainable { tape.leaf(t) } else { tape.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
        Tensor::full(shape, T::one())
    }

    /// Normal with the given std, redrawn outside ±2 std.
    pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::of(z * std);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Glorot uniform with explicit fan-in / fan-out.
    pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }
}
