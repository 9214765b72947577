//! Named, versionable parameter storage shared by every network component.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// All learnable tensors of a model, keyed by dotted name (`rpn.conv.w`).
/// Iteration order is the lexicographic name order, which keeps updates,
/// serialization and digests deterministic.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name).map(|a| a.as_ref())
    }

    pub(crate) fn get_arc(&self, name: &str) -> Option<Arc<Tensor<T>>> {
        self.tensors.get(name).cloned()
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Mutable access; copies the tensor first if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>())))
                .collect(),
        }
    }

    /// 64-bit FNV-1a digest over names, shapes and the `f32` little-endian
    /// bytes of every value. Equal digests ⇔ equal checkpoint payloads.
    pub fn digest(&self) -> u64 {
        let mut h = FnvHasher::default();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write_u8(0);
            for &d in t.shape() {
                h.write_u64(d as u64);
            }
            for &v in t.data() {
                h.write(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// He-uniform for ReLU layers: `a = sqrt(6 / fan_in)`.
    He,
    Zeros,
    Constant(f64),
}

pub fn init_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, init: Init) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Constant(c) => vec![T::cast(c); n],
        Init::Uniform(a) => (0..n).map(|_| T::cast(rng.gen_range(-a..=a))).collect(),
        Init::He => {
            let a = (6.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| T::cast(rng.gen_range(-a..=a))).collect()
        }
    };
    Tensor::from_vec(shape, data).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn digest_changes_with_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::vector(vec![1.0, 2.0]));
        let d1 = s.digest();
        s.get_mut("a").unwrap().data_mut()[0] = 1.5;
        assert_ne!(d1, s.digest());
    }

    #[test]
    fn uniform_init_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = init_tensor(&mut rng, &[100], 10, Init::Uniform(0.08));
        assert!(t.data().iter().all(|v| v.abs() <= 0.08));
    }
}
