use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor2};
use crate::error::{Error, Result};

/// Named parameter tensors with one gradient slot per entry.
///
/// Entries are kept in a sorted map so every iteration order (init,
/// serialization, gradient clipping) is deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor2>,
    grads: BTreeMap<String, Tensor2>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            grads: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Insert a parameter with a zeroed gradient slot. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor2) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidConfig(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let (r, c) = value.shape();
        self.grads.insert(name.to_string(), Tensor2::zeros(r, c));
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    /// Insert a parameter initialized uniformly in [-1/√fan_in, 1/√fan_in].
    ///
    /// The RNG stream is derived from the store seed and the parameter name,
    /// so initialization does not depend on insertion order.
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Result<()> {
        let bound = if fan_in == 0 {
            0.0
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.rng_seed, name));
        let data: Vec<Scalar> = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound) as Scalar)
            .collect();
        self.insert(name, Tensor2::from_vec(rows, cols, data)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Overwrite the gradient slot for `name`. The shape must match the
    /// parameter's shape.
    pub fn set_grad(&mut self, name: &str, grad: Tensor2) -> Result<()> {
        let param = self.get(name)?;
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name:?}: param {:?} vs grad {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        self.grads.insert(name.to_string(), grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (name, g) in self.grads.iter_mut() {
            let (r, c) = self.entries[name].shape();
            *g = Tensor2::zeros(r, c);
        }
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.data().len()).sum()
    }

    /// Global L2 norm of all gradient slots.
    pub fn grad_norm(&self) -> Scalar {
        self.grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<Scalar>())
            .sum::<Scalar>()
            .sqrt()
    }

    /// params -= lr * grads, with the global gradient norm clipped to `clip`.
    pub fn apply_gradient_step(&mut self, lr: Scalar, clip: Scalar) {
        let norm = self.grad_norm();
        let factor = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        for (name, value) in self.entries.iter_mut() {
            let g = &self.grads[name];
            for (v, gv) in value.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * factor * gv;
            }
        }
    }
}

/// SplitMix-style mixing of a base seed with a string tag.
pub fn mix_seed(base: u64, tag: &str) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = h.wrapping_add(b as u64);
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Mix a base seed with an integer stream index.
pub fn mix_seed_index(base: u64, index: u64) -> u64 {
    let mut h = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unique_names_enforced() {
        let mut p = ParamStore::new(0);
        p.insert("w", Tensor2::zeros(2, 2)).unwrap();
        assert!(p.insert("w", Tensor2::zeros(2, 2)).is_err());
    }

    #[test]
    fn grad_slots_match_shapes() {
        let mut p = ParamStore::new(0);
        p.insert_uniform("w", 3, 4, 4).unwrap();
        assert_eq!(p.grad("w").unwrap().shape(), (3, 4));
        assert!(p.set_grad("w", Tensor2::zeros(4, 3)).is_err());
        assert!(p.set_grad("w", Tensor2::zeros(3, 4)).is_ok());
    }

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(7);
        a.insert_uniform("x", 2, 2, 2).unwrap();
        a.insert_uniform("y", 2, 2, 2).unwrap();
        let mut b = ParamStore::new(7);
        b.insert_uniform("y", 2, 2, 2).unwrap();
        b.insert_uniform("x", 2, 2, 2).unwrap();
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
        assert_eq!(a.get("y").unwrap(), b.get("y").unwrap());
    }

    #[test]
    fn init_bounds_respect_fan_in() {
        let mut p = ParamStore::new(3);
        p.insert_uniform("w", 16, 16, 16).unwrap();
        let bound = 0.25;
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }
}
