//! Named trainable arrays with gradient slots and Adam moments.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Every learnable array of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    /// Adam step counter.
    pub(crate) step: u64,
}

/// Rounds to the nearest 32-bit float; stored parameters live on that grid so
/// checkpoints round-trip exactly.
#[inline]
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let (r, c) = value.shape();
        let value = value.map(quantize);
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(ParamId(id))
    }

    /// Uniform in `±sqrt(6 / fan_in)`, seeded by `(name, seed)` only.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        seed: u64,
    ) -> Result<ParamId> {
        let name = name.into();
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(name_hash(&name) ^ seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.register(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Adds `other`'s gradients into this store. Both stores must share the
    /// same layout.
    pub fn add_grads_from(&mut self, other: &ParamStore) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.grad.add_assign(&b.grad);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.is_finite())
    }

    /// Bitwise equality of parameter values and optimizer state.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        self.step == other.step
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && bits(&a.value) == bits(&b.value)
                    && bits(&a.m) == bits(&b.m)
                    && bits(&a.v) == bits(&b.v)
            })
    }

    pub(crate) fn push_entry(&mut self, entry: ParamEntry) -> Result<()> {
        if self.by_name.contains_key(&entry.name) {
            return Err(Error::DuplicateParam(entry.name));
        }
        self.by_name.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_a_pure_function_of_name_and_seed() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let pa = a.register_uniform("layer.w", 4, 3, 4, 9).unwrap();
        b.register_uniform("other", 2, 2, 2, 9).unwrap();
        let pb = b.register_uniform("layer.w", 4, 3, 4, 9).unwrap();
        assert_eq!(a.value(pa), b.value(pb));

        let mut c = ParamStore::new();
        let pc = c.register_uniform("layer.w", 4, 3, 4, 10).unwrap();
        assert_ne!(a.value(pa), c.value(pc));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut s = ParamStore::new();
        let p = s.register_uniform("w", 50, 20, 24, 1).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(s.value(p).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.register("x", Tensor::zeros(1, 1)).unwrap();
        assert!(matches!(
            s.register("x", Tensor::zeros(1, 1)),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn gradient_slots_match_parameter_shapes() {
        let mut s = ParamStore::new();
        let p = s.register_uniform("w", 3, 7, 3, 0).unwrap();
        assert_eq!(s.grad(p).shape(), s.value(p).shape());
    }
}
