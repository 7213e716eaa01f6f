use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// One entry of the serialized checkpoint document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.add(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn to_named(&self) -> BTreeMap<String, NamedTensor> {
        self.iter()
            .map(|(_, name, t)| {
                (
                    name.to_string(),
                    NamedTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Overwrites every parameter from a named map. Names and shapes must
    /// match exactly; all offending entries are reported together.
    pub fn load_named(&mut self, named: &BTreeMap<String, NamedTensor>) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            match named.get(name) {
                None => problems.push(format!("{name}: missing")),
                Some(nt) if nt.shape != t.shape() => problems.push(format!(
                    "{name}: expected shape {:?}, checkpoint has {:?}",
                    t.shape(),
                    nt.shape
                )),
                Some(_) => {}
            }
        }
        for name in named.keys() {
            if self.id(name).is_none() {
                problems.push(format!("{name}: not a model parameter"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let nt = &named[name];
            *value = Tensor::new(nt.shape.clone(), nt.data.clone())?;
        }
        Ok(())
    }

    /// JSON document `{name: {shape, data}}`. Floats use the shortest
    /// representation that parses back to the identical bits.
    pub fn to_json(&self) -> Result<String> {
        if let Some((_, name, _)) = self.iter().find(|(_, _, t)| !t.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "{name} contains non-finite values"
            )));
        }
        Ok(serde_json::to_string(&self.to_named())?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let named: BTreeMap<String, NamedTensor> = serde_json::from_str(json)?;
        let mut store = ParamStore::new();
        for (name, nt) in named {
            store.add(name, Tensor::new(nt.shape, nt.data)?);
        }
        Ok(store)
    }
}

/// Per-parameter gradients from one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn zeros_like_len(n: usize) -> Self {
        Gradients {
            grads: vec![None; n],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, shape: &[usize], g: &[f64]) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        let slot = self.grads[id.0].get_or_insert_with(|| Tensor::zeros(shape));
        for (acc, v) in slot.data_mut().iter_mut().zip(g) {
            *acc += v;
        }
    }

    /// `None` when the parameter did not influence the loss.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, t)| t.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}
