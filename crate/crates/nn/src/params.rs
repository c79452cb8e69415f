use std::collections::HashMap;

use crate::checkpoint::{DType, NamedTensorStore, StoredTensor};
use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::InvalidSpec {
                layer: name,
                reason: "duplicate parameter name".into(),
            });
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so that their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in &mut self.tensors {
                if let Some(g) = t.take_grad() {
                    let scaled: Vec<f64> = g.iter().map(|x| x * s).collect();
                    t.accumulate_grad(&scaled).expect("same length");
                }
            }
        }
        norm
    }

    /// Writes every parameter under `prefix` into a checkpoint container.
    pub fn export(&self, prefix: &str, out: &mut NamedTensorStore, dtype: DType) -> Result<()> {
        for (name, t) in self.iter() {
            out.insert(
                format!("{prefix}{name}"),
                StoredTensor::new(t.shape().to_vec(), dtype, t.data().to_vec())?,
            )?;
        }
        Ok(())
    }

    /// Overwrites parameter values from a checkpoint; every parameter must be present
    /// with a matching shape.
    pub fn import(&mut self, prefix: &str, src: &NamedTensorStore) -> Result<()> {
        for i in 0..self.tensors.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let st = src
                .get(&key)
                .ok_or_else(|| NnError::UnknownParam(key.clone()))?;
            let t = &mut self.tensors[i];
            if st.shape() != t.shape() {
                return Err(NnError::shape(&key, format!("{:?}", t.shape()), st.shape()));
            }
            t.data_mut().copy_from_slice(st.values());
        }
        Ok(())
    }
}
