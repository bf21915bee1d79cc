//! Named parameter storage shared by every model component.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Parameters in creation order. Random initialisation draws from a stream keyed by
/// `(seed, name)`, so a parameter's initial value does not depend on which other
/// parameters were created before it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value });
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let name = name.into();
        let mut rng = self.rng_for(&name);
        let t = Tensor::uniform(shape, bound, &mut rng);
        self.add(name, t)
    }

    /// Uniform(-b, b) with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    /// Identity matrix plus uniform noise of the given amplitude.
    pub fn near_identity(&mut self, name: impl Into<String>, dim: usize, noise: f64) -> ParamId {
        let name = name.into();
        let mut rng = self.rng_for(&name);
        let mut t = Tensor::uniform(&[dim, dim], noise, &mut rng);
        for i in 0..dim {
            t.data_mut()[i * dim + i] += 1.0;
        }
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Overwrites every parameter from `(name, tensor)` pairs. Names and shapes must
    /// match this store exactly.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, t) in entries {
            let idx = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[idx].value;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}
