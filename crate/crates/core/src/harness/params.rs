//! JSON parameter files.
//!
//! ```json
//! {"format": "mivpg-params v1",
//!  "tensors": [{"name": "queries", "shape": [8, 64], "data": [...]}, ...]}
//! ```
//!
//! Tensors are listed in the model's visit order; loading matches them by
//! name against the layout implied by the config.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mivpg::{MivpgConfig, MivpgParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PARAMS_FORMAT: &str = "mivpg-params v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    format: String,
    tensors: Vec<Entry>,
}

pub fn params_to_json(params: &MivpgParams<Tensor>) -> String {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| Entry {
            name,
            shape: t.shape().to_vec(),
            data: t.into_data(),
        })
        .collect();
    let file = ParamsFile {
        format: PARAMS_FORMAT.into(),
        tensors,
    };
    serde_json::to_string(&file).expect("parameters serialize")
}

pub fn params_from_json(config: &MivpgConfig, text: &str) -> Result<MivpgParams<Tensor>> {
    let file: ParamsFile =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("parameter file: {e}")))?;
    if file.format != PARAMS_FORMAT {
        return Err(Error::Config(format!(
            "parameter file format `{}`, expected `{PARAMS_FORMAT}`",
            file.format
        )));
    }
    let mut by_name: HashMap<String, Entry> = HashMap::with_capacity(file.tensors.len());
    for e in file.tensors {
        if let Some(dup) = by_name.insert(e.name.clone(), e) {
            return Err(Error::Config(format!("parameter `{}` appears twice", dup.name)));
        }
    }
    let mut params = MivpgParams::new(config, &mut Rng::new(0))?;
    let mut values = Vec::new();
    for (name, template) in params.named_tensors() {
        let e = by_name
            .remove(&name)
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is missing")))?;
        if e.shape != template.shape() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, config expects {:?}",
                e.shape,
                template.shape()
            )));
        }
        values.push(Tensor::new(e.shape, e.data)?);
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::Config(format!("unknown parameter `{extra}`")));
    }
    params.assign(&values)?;
    Ok(params)
}

pub fn save_params(params: &MivpgParams<Tensor>, path: &Path) -> Result<()> {
    std::fs::write(path, params_to_json(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(config: &MivpgConfig, path: &Path) -> Result<MivpgParams<Tensor>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    params_from_json(config, &text)
}
