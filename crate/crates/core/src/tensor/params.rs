use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

/// Named `f32` parameters in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Uniform init in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let a = (6.0 / (rows + cols) as f64).sqrt() as f32;
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
        self.insert(name, Tensor::new(vec![rows, cols], data).expect("shape matches"));
    }

    pub fn init_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f32, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0f32, std).expect("positive std");
        let data = (0..n).map(|_| rng.sample(dist)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| TensorError::Missing(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies tensors from `source` whose names pass `filter`. Every copied
    /// name must exist here with the same shape; otherwise nothing changes
    /// and the first offending tensor is reported.
    pub fn load_from<'a>(
        &mut self,
        source: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        filter: impl Fn(&str) -> bool,
    ) -> Result<usize> {
        let mut staged = Vec::new();
        for (name, t) in source {
            if !filter(name) {
                continue;
            }
            let current = self.require(name)?;
            if current.shape() != t.shape() {
                return Err(TensorError::ParamShape {
                    name: name.to_string(),
                    expected: current.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            staged.push((name.to_string(), t.clone()));
        }
        let n = staged.len();
        for (name, t) in staged {
            self.tensors.insert(name, t);
        }
        Ok(n)
    }
}
