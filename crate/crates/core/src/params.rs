//! Named parameter stores and their binding to a [`Graph`].

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::seed::Rng;
use crate::tensor::{Mat, Scalar};

/// Ordered named tensors. Non-trainable entries (buffers) are carried along
/// for persistence but never bound as gradient-tracked leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    trainable: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), trainable: Vec::new(), lookup: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat<T>, trainable: bool) -> usize {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    /// Index of a parameter that must exist.
    pub fn idx(&self, name: &str) -> usize {
        self.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, i: usize) -> &Mat<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat<T> {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Mat<T>] {
        &self.values
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    /// Total number of scalar entries in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.values.iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(v, _)| v.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
            trainable: self.trainable.clone(),
            lookup: self.lookup.clone(),
        }
    }

    /// SHA-256 over names, shapes and values (widened to f64 so the digest
    /// does not depend on the element type).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((value.rows as u64).to_le_bytes());
            h.update((value.cols as u64).to_le_bytes());
            for v in &value.data {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Puts every tensor on the tape. Trainable tensors become tracked leaves
    /// when `track` is set, everything else becomes a constant.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &trainable)| if track && trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Gradients of the bound tensors, in store order. Untracked entries
    /// come back as `None`.
    pub fn grads<T: Scalar>(&self, grads: &Gradients<T>) -> GradStore<T> {
        GradStore { grads: self.vars.iter().map(|&v| grads.get(v).cloned()).collect() }
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore<T> {
    pub grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn empty(len: usize) -> Self {
        Self { grads: vec![None; len] }
    }

    pub fn get(&self, i: usize) -> Option<&Mat<T>> {
        self.grads.get(i).and_then(Option::as_ref)
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &GradStore<T>) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient store size");
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for m in self.grads.iter_mut().flatten() {
            for v in &mut m.data {
                *v *= c;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().flatten().all(|m| m.data.iter().all(|v| *v == T::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::all_finite)
    }
}

/// Glorot-uniform `fan_in x fan_out` weight.
pub fn xavier<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Mat<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-a..a))).collect())
}

pub fn normal<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat<T> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect())
}

/// Weight and bias indices of a linear layer.
#[derive(Clone, Copy, Debug)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: usize,
}

impl LinearIdx {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.insert(format!("{prefix}.weight"), xavier(rng, fan_in, fan_out), true);
        let bias = store.insert(format!("{prefix}.bias"), Mat::zeros(1, fan_out), true);
        Self { weight, bias }
    }

    pub fn locate<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Self {
        Self { weight: store.idx(&format!("{prefix}.weight")), bias: store.idx(&format!("{prefix}.bias")) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Layer-norm affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct NormIdx {
    pub weight: usize,
    pub bias: usize,
}

pub const LN_EPS: f64 = 1e-6;

impl NormIdx {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        let weight = store.insert(format!("{prefix}.weight"), Mat::filled(1, dim, T::one()), true);
        let bias = store.insert(format!("{prefix}.bias"), Mat::zeros(1, dim), true);
        Self { weight, bias }
    }

    pub fn locate<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Self {
        Self { weight: store.idx(&format!("{prefix}.weight")), bias: store.idx(&format!("{prefix}.bias")) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.weight), p.var(self.bias), LN_EPS)
    }
}
