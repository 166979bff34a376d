use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::matrix::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Panics when the tensor is missing; model code only asks for names it
    /// created itself.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Moves every tensor of `other` into `self`, replacing same-named ones.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Seeded initialiser. Each tensor draws from its own stream derived from
/// `(seed, name)`, so adding a tensor never perturbs the others.
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Tensor {
        self.uniform(name, rows, cols, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn uniform(&self, name: &str, rows: usize, cols: usize, bound: f64) -> Tensor {
        let mut rng = self.rng_for(name);
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Tensor::new(rows, cols, data)
    }
}

/// Binds [`ParamSet`] entries into a [`Graph`] once each, recording which
/// ones take part in differentiation.
pub struct Binder<'p> {
    params: &'p ParamSet,
    trainable: &'p dyn Fn(&str) -> bool,
    vars: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamSet, trainable: &'p dyn Fn(&str) -> bool) -> Self {
        Self {
            params,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let t = self.params.expect(name).clone();
        let v = g.leaf(t, (self.trainable)(name));
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound trainable tensor.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            if (self.trainable)(name) {
                let shape = self.params.expect(name).shape();
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

pub fn no_grad(_: &str) -> bool {
    false
}

pub fn all_grad(_: &str) -> bool {
    true
}
