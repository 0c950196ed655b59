use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::GraphSpec;
use crate::tensor::{DType, Tensor};

/// Per-tensor optimizer memory.
#[derive(Clone, Debug, PartialEq)]
pub enum OptState {
    RmsProp { square_avg: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
}

/// Named weight tensors plus optimizer state keyed by the same names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    pub(crate) state: BTreeMap<String, OptState>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uniform `±sqrt(1/fan_in)` initialisation for every parameter of `graph`.
    pub fn init(graph: &GraphSpec, dtype: DType, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for (name, shape, fan_in) in graph.param_specs()? {
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            store.insert(name, Tensor::from_values(shape, dtype, &values)?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.state.remove(&name);
        self.tensors.insert(name, t);
    }

    /// Swaps in new values for an existing tensor, keeping its optimizer
    /// memory.
    pub fn replace_values(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(TensorError::ParamShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.state.remove(name);
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Names of float tensors, which are the ones an optimizer updates.
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.dtype().is_float())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drops optimizer memory, e.g. before fine-tuning a rewired model.
    pub fn reset_optimizer(&mut self) {
        self.state.clear();
        self.step = 0;
    }

    /// Checks that names and shapes match `graph` exactly.
    pub fn validate(&self, graph: &GraphSpec) -> Result<()> {
        let specs = graph.param_specs()?;
        for (name, shape, _) in &specs {
            let t = self.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(TensorError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !specs.iter().any(|(n, _, _)| n == *k))
        {
            return Err(TensorError::UnexpectedParam(extra.clone()));
        }
        Ok(())
    }

    /// Copies every tensor into `dtype` (float dtypes only).
    pub fn cast(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new();
        for (n, t) in &self.tensors {
            out.insert(
                n.clone(),
                Tensor::from_values(t.shape().to_vec(), dtype, &t.to_f64_vec())?,
            );
        }
        Ok(out)
    }
}
