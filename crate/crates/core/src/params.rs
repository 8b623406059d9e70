//! Named trainable parameters and their on-disk checkpoint layout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Insertion-ordered map from dotted names to trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        tensor.set_requires_grad(true);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Copy the gradients of every parameter bound on `tape` into the registry.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Grads) {
        for (name, var) in tape.bound_params() {
            if let (Some(g), Some(t)) = (grads.get(*var), self.get_mut(name)) {
                t.accumulate_grad(g);
            }
        }
    }

    /// Move every parameter under `prefix.` into `other`.
    pub fn absorb(&mut self, prefix: &str, other: ParamRegistry) -> Result<()> {
        for (name, t) in other.entries {
            self.insert(&format!("{prefix}.{name}"), t)?;
        }
        Ok(())
    }

    /// Round every value to the nearest `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.entries {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Write one AGT1 file per parameter plus `params.txt` listing names in order.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut listing = String::new();
        for (name, t) in &self.entries {
            t.save_agt1(dir.join(format!("{name}.agt")))?;
            listing.push_str(name);
            listing.push('\n');
        }
        fs::write(dir.join("params.txt"), listing)?;
        Ok(())
    }

    /// Overwrite values from a checkpoint directory. Every registered name must
    /// be present with a matching shape.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for (name, t) in &mut self.entries {
            let path = dir.join(format!("{name}.agt"));
            let loaded = Tensor::load_agt1(&path)?;
            if loaded.shape() != t.shape() {
                return Err(Error::data(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(loaded.data());
            t.zero_grad();
        }
        Ok(())
    }
}

/// Uniform `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, He-style fan-in scaling.
pub(crate) fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for affine heads.
pub(crate) fn lecun_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_ordered() {
        let mut reg = ParamRegistry::new();
        reg.insert("b.w", Tensor::zeros(&[2])).unwrap();
        reg.insert("a.w", Tensor::zeros(&[3])).unwrap();
        assert!(reg.insert("b.w", Tensor::zeros(&[1])).is_err());
        assert_eq!(reg.names().collect::<Vec<_>>(), ["b.w", "a.w"]);
        assert_eq!(reg.num_scalars(), 5);
        assert!(reg.get("a.w").unwrap().requires_grad());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ParamRegistry::new();
        reg.insert("x.weight", Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap();
        reg.save_dir(dir.path()).unwrap();

        let mut other = ParamRegistry::new();
        other.insert("x.weight", Tensor::zeros(&[2, 2])).unwrap();
        other.load_dir(dir.path()).unwrap();
        assert_eq!(other.get("x.weight").unwrap().data(), &[0.5, -1.0, 2.0, 0.25]);

        let mut wrong = ParamRegistry::new();
        wrong.insert("x.weight", Tensor::zeros(&[4])).unwrap();
        assert!(wrong.load_dir(dir.path()).is_err());
    }
}
