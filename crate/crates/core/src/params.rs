//! Named parameter collections and graph binding.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Graph, Mat, Var};
use crate::error::{Error, Result};

/// An ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    decay: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Decaying parameters from `(name, value)` pairs.
    pub fn from_pairs(pairs: &[(&str, Mat)]) -> Self {
        let mut p = ParamSet::new();
        for (n, v) in pairs {
            p.add(*n, v.clone(), true);
        }
        p
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.decay.push(decay);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.values[idx]
    }

    pub fn decays(&self, idx: usize) -> bool {
        self.decay[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::State("parameter names differ".into()));
        }
        for ((name, a), b) in self.names.iter().zip(&self.values).zip(&other.values) {
            if a.dim() != b.dim() {
                return Err(Error::State(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    b.dim(),
                    a.dim()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| g.leaf(v.clone(), trainable))
            .collect();
        Bound { vars }
    }
}

/// Graph leaves corresponding to one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn v(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    /// Extracts gradients in parameter order; parameters that did not
    /// influence the loss get zeros.
    pub fn grads(&self, grads: &mut Grads, set: &ParamSet) -> Vec<Mat> {
        self.vars
            .iter()
            .zip(set.values())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Mat::zeros(p.dim())))
            .collect()
    }
}

pub fn normal_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Scaled normal init with std `1/sqrt(fan_in)`.
pub fn fan_in_init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, rows: usize, cols: usize) -> Mat {
    normal_init(rng, rows, cols, 1.0 / (fan_in.max(1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn digest_tracks_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.add("w", normal_init(&mut rng, 2, 3, 1.0), true);
        let d0 = p.digest();
        assert_eq!(d0, p.clone().digest());
        p.get_mut(0)[[0, 0]] = f64::from_bits(p.get(0)[[0, 0]].to_bits() ^ 1);
        assert_ne!(d0, p.digest());
    }

    #[test]
    fn structure_mismatch_names_offender() {
        let mut a = ParamSet::new();
        a.add("w", Mat::zeros((2, 2)), true);
        let mut b = ParamSet::new();
        b.add("w", Mat::zeros((3, 2)), true);
        let err = a.check_same_structure(&b).unwrap_err().to_string();
        assert!(err.contains("`w`"), "{err}");
    }
}
