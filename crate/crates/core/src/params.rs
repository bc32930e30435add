//! Named parameter tensors and their initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He et al. fan-in normal: N(0, 2 / fan_in).
    KaimingNormal { fan_in: usize },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

/// Ordered list of parameter specs; the index of a spec is its parameter id.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}

/// The learnable state of the whole model, one named matrix per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ModelParams {
    /// Draw every tensor in `layout` from its initializer. Weights follow the
    /// Kaiming fan-in normal scheme, biases and the log inverse-variances start
    /// at zero.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.specs.len());
        let mut values = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            let value = match spec.init {
                Init::KaimingNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Matrix::from_shape_simple_fn(spec.shape, || normal.sample(&mut rng))
                }
                Init::Zeros => Matrix::zeros(spec.shape),
            };
            names.push(spec.name.clone());
            values.push(value);
        }
        Self { names, values }
    }

    /// Build from already-materialized tensors, checking them against `layout`.
    pub fn from_named(layout: &Layout, mut named: Vec<(String, Matrix)>) -> Result<Self> {
        if named.len() != layout.specs.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut values = Vec::with_capacity(named.len());
        for spec in &layout.specs {
            let pos = named
                .iter()
                .position(|(n, _)| n == &spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", spec.name)))?;
            let (name, value) = named.swap_remove(pos);
            if value.dim() != spec.shape {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    name,
                    value.dim(),
                    spec.shape
                )));
            }
            names.push(name);
            values.push(value);
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        for (name, v) in self.iter() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(name.to_string());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        let mut l = Layout::default();
        l.add("w", (64, 64), Init::KaimingNormal { fan_in: 64 });
        l.add("b", (1, 64), Init::Zeros);
        l.add("w2", (128, 32), Init::KaimingNormal { fan_in: 128 });
        l
    }

    #[test]
    fn same_seed_same_params() {
        let a = ModelParams::init(&layout(), 11);
        let b = ModelParams::init(&layout(), 11);
        let c = ModelParams::init(&layout(), 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn kaiming_variance_and_zero_bias() {
        let p = ModelParams::init(&layout(), 3);
        for (id, fan_in) in [(0usize, 64.0), (2, 128.0)] {
            let w = p.get(id);
            assert_eq!(w.len(), 4096);
            let mean = w.mean().unwrap();
            let var = w.mapv(|x| (x - mean) * (x - mean)).sum() / (w.len() as f64 - 1.0);
            let expected = 2.0 / fan_in;
            assert!(
                (var - expected).abs() / expected < 0.1,
                "variance {var} vs {expected}"
            );
        }
        assert!(p.get(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn from_named_checks_shapes() {
        let l = layout();
        let p = ModelParams::init(&l, 0);
        let mut named: Vec<_> = p.iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
        named.reverse();
        assert_eq!(ModelParams::from_named(&l, named.clone()).unwrap(), p);
        named[0].1 = Matrix::zeros((2, 2));
        assert!(ModelParams::from_named(&l, named).is_err());
    }
}
