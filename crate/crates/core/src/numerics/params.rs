use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization scheme for a freshly allocated parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// How a store was initialized; persisted alongside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitMeta {
    pub seed: u64,
    pub weight_std: f64,
    pub scheme: String,
}

/// Named parameter tensors with deterministic initialization.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    meta: InitMeta,
}

impl ParamStore {
    pub fn new(seed: u64, weight_std: f64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            meta: InitMeta {
                seed,
                weight_std,
                scheme: format!(
                    "weights: truncated normal std {weight_std}; biases: zeros; positional: zeros"
                ),
            },
        }
    }

    pub fn meta(&self) -> &InitMeta {
        &self.meta
    }

    pub fn weight_std(&self) -> f64 {
        self.meta.weight_std
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = self.rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
        };
        self.insert(name, Tensor::new(shape, data)?)
    }

    /// Weight initialized with the store's configured std.
    pub fn add_weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let std = self.meta.weight_std;
        self.add(name, shape, Init::TruncNormal(std))
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs. Every name must exist
    /// with a matching shape, and every store entry must be covered.
    pub fn load_from<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.tensors.len()];
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(invalid(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    self.tensors[id.0].shape(),
                    t.shape()
                )));
            }
            self.tensors[id.0] = t.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(invalid(format!(
                "checkpoint is missing parameter `{}`",
                self.names[missing]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new(0, 0.02);
        s.add("w", &[2, 2], Init::Zeros).unwrap();
        assert!(s.add("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut a = ParamStore::new(7, 0.02);
        let mut b = ParamStore::new(7, 0.02);
        let ia = a.add_weight("w", &[100, 10]).unwrap();
        let ib = b.add_weight("w", &[100, 10]).unwrap();
        assert_eq!(a.get(ia), b.get(ib));
        assert!(a.get(ia).data().iter().all(|v| v.abs() <= 0.04));
    }
}
