//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "trainlab-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "tensors": [ { "name": "embed", "shape": [512, 128], "data": [...] }, ... ]
//! }
//! ```
//!
//! Tensor order follows `Model::named_params`. Values are written with
//! shortest round-trip formatting, so save/load is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "trainlab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

pub fn to_json(model: &Model) -> Result<String> {
    let c = Container {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config().clone(),
        tensors: model
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&c).map_err(|e| Error::Parse(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Model> {
    let c: Container = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if c.format != FORMAT || c.version != VERSION {
        bail!(
            Parse,
            "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
            c.format,
            c.version
        );
    }
    let tensors = c
        .tensors
        .into_iter()
        .map(|t| Ok((t.name, Tensor::new(t.shape, t.data)?)))
        .collect::<Result<Vec<_>>>()?;
    Model::from_named(c.config, tensors)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
