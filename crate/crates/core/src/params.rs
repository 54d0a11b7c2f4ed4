//! Named parameter tensors and their binding onto a [`Tape`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::tape::{Gradients, Mat, Tape, Var};

/// Ordered collection of named 2-D tensors. Vectors are stored as `1 x n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
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

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Same names and shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.dim())))
                .collect(),
        }
    }

    /// Places every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Collects the gradient of every bound tensor; untouched tensors get zeros.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, value) in &self.tensors {
            let g = bound
                .vars
                .get(name)
                .and_then(|&v| grads.get(v))
                .cloned()
                .unwrap_or_else(|| Mat::zeros(value.dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }
}

/// Uniform init in `[-limit, limit]` with `limit = gain * sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut impl Rng, rows: usize, cols: usize, gain: f64) -> Mat {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..=limit))
}

/// He-style uniform init for ReLU layers, fan-in only.
pub fn he_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / rows as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..=limit))
}
