use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::routing::ModulePath;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
    Ones,
}

/// One parameter array of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Overridable component owning this parameter, if any.
    pub path: Option<ModulePath>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Appends parameter specs under a common key prefix.
pub(crate) struct SpecBuilder<'a> {
    pub out: &'a mut Vec<ParamSpec>,
    pub prefix: String,
    pub path: Option<ModulePath>,
}

impl SpecBuilder<'_> {
    fn push(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.out.push(ParamSpec { key: format!("{}.{name}", self.prefix), shape, init, path: self.path });
    }

    /// Weight `[din x dout]`, optionally followed by a bias `[dout]`.
    pub fn linear(&mut self, w: &str, b: Option<&str>, din: usize, dout: usize) {
        self.push(w, vec![din, dout], Init::Xavier { fan_in: din, fan_out: dout });
        if let Some(b) = b {
            self.push(b, vec![dout], Init::Zeros);
        }
    }

    pub fn norm(&mut self, name: &str, d: usize) {
        self.push(&format!("{name}.gamma"), vec![d], Init::Ones);
        self.push(&format!("{name}.beta"), vec![d], Init::Zeros);
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.push(name, shape, Init::Zeros);
    }

    pub fn xavier(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) {
        self.push(name, shape, Init::Xavier { fan_in, fan_out });
    }
}

/// Named parameter arrays, ordered by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S = f32> {
    entries: BTreeMap<String, Tensor<S>>,
}

fn param_rng(seed: u64, owner: &str, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(owner.as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Fresh parameters for `specs`. Each array draws from its own stream
    /// keyed by `(seed, owner, key)`, so values do not depend on which other
    /// parameters exist.
    pub fn initialize(specs: &[ParamSpec], seed: u64, owner: &str) -> Self {
        let mut set = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data = match spec.init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = param_rng(seed, owner, &spec.key);
                    (0..n).map(|_| S::of(rng.random_range(-a..a))).collect()
                }
            };
            set.insert(spec.key.clone(), Tensor::new(spec.shape.clone(), data).expect("spec shape"));
        }
        set
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor<S>) -> Option<Tensor<S>> {
        self.entries.insert(key.into(), value)
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<S>> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor<S>> {
        self.entries.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

impl ParamSet<f32> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}
