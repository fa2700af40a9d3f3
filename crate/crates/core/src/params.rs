use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter array is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Ones,
    Zeros,
    Identity,
}

/// Name, shape and optimizer treatment of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter specs and hands out their indices.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, decay: bool) -> usize {
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init, decay });
        self.specs.len() - 1
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Ordered, named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    /// Allocates every spec in order, drawing normal entries from a ChaCha8
    /// stream seeded with `seed`.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(&s.shape, |_| T::from_f64(dist.sample(&mut rng)))
                }
                Init::Ones => Tensor::ones(&s.shape),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Identity => {
                    let d = *s.shape.last().expect("identity init needs a matrix");
                    Tensor::from_fn(&s.shape, |i| if (i % (d * d)) / d == i % d { T::one() } else { T::zero() })
                }
            })
            .collect();
        Self::from_parts(specs, tensors).expect("initialized shapes match")
    }

    pub fn from_parts(specs: &[ParamSpec], tensors: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(dim_err!("{} specs for {} tensors", specs.len(), tensors.len()));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(dim_err!("parameter {} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape));
            }
        }
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { names, tensors, decay: specs.iter().map(|s| s.decay).collect(), index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn decays(&self) -> &[bool] {
        &self.decay
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Total number of scalars across all arrays.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every array on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    /// FNV-1a over names and raw little-endian values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut bytes = Vec::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            bytes.clear();
            bytes.extend_from_slice(n.as_bytes());
            for &x in t.data() {
                x.write_le(&mut bytes);
            }
            for b in &bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_seeded() {
        let mut reg = ParamRegistry::default();
        reg.add("w", &[3, 4], Init::Normal(0.02), true);
        reg.add("g", &[4], Init::Ones, false);
        reg.add("e", &[2, 3, 3], Init::Identity, true);
        let specs = reg.into_specs();
        let a = ParamStore::<f64>::initialize(&specs, 7);
        let b = ParamStore::<f64>::initialize(&specs, 7);
        let c = ParamStore::<f64>::initialize(&specs, 8);
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.count(), 12 + 4 + 18);
        assert_eq!(a.get("e").unwrap().data()[..9], [1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(a.get("e").unwrap().data()[9..], [1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }
}
