use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{PetsError, Result};

pub const CHECKPOINT_FORMAT: &str = "pets-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named learnable tensors plus their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

/// Serialized form of one parameter.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Version-tagged map from parameter path to shape and row-major values.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamFile {
    pub format: String,
    pub version: u32,
    pub params: BTreeMap<String, ParamRecord>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Names are hierarchical paths such as
    /// `fpa.0.mpr.gate.2.weight` and must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of parameters whose path starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn grad_norm(&self, id: ParamId) -> f64 {
        self.params[id.0].grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        ParamRecord {
                            shape: p.value.shape().to_vec(),
                            values: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Overwrite every parameter from `file`. The file must name exactly the
    /// parameters of this store, with matching shapes.
    pub fn load_file(&mut self, file: &ParamFile) -> Result<()> {
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(PetsError::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        for p in &self.params {
            let rec = file.params.get(&p.name).ok_or_else(|| {
                PetsError::Shape(format!("checkpoint is missing parameter {}", p.name))
            })?;
            if rec.shape != p.value.shape() || rec.values.len() != p.value.numel() {
                return Err(PetsError::Shape(format!(
                    "parameter {}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = file.params.keys().find(|k| !self.by_name.contains_key(*k)) {
            return Err(PetsError::Shape(format!(
                "checkpoint parameter {extra} does not exist in the model"
            )));
        }
        for p in &mut self.params {
            let rec = &file.params[&p.name];
            p.value.data_mut().copy_from_slice(&rec.values);
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, text).map_err(|e| PetsError::io(path, e))
    }

    pub fn load_json(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| PetsError::io(path, e))?;
        let file: ParamFile = serde_json::from_str(&text)?;
        self.load_file(&file)
    }
}

/// Uniform Glorot initialisation for a `[fan_in, fan_out]`-like tensor.
pub fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
