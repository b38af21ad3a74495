//! Versioned JSON container for trained parameters and the config that
//! produced them.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! reloaded tensor is bit-identical to the saved one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taxolink_numerics::{Parameterized, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::node2vec::NodeKind;

pub const CHECKPOINT_FORMAT: &str = "taxolink-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape.clone(), self.data.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// `ner`, `el` or `mtl`.
    pub task: String,
    pub config: RunConfig,
    /// Character vocabulary of the tagger, when it has a character encoder.
    pub char_vocab: Option<Vec<char>>,
    /// Taxonomy ids in node-index order, for linking checkpoints.
    pub node_ids: Option<Vec<String>>,
    pub node_kind: Option<NodeKind>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// The output directory is left out of the stored config so a model
    /// does not depend on where it was written.
    pub fn new(task: &str, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.paths.out = PathBuf::new();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            task: task.into(),
            config,
            char_vocab: None,
            node_ids: None,
            node_kind: None,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: &Tensor) {
        self.tensors.push(NamedTensor::new(name, t));
    }

    /// Adds every parameter of `params` under `prefix.`.
    pub fn push_params(&mut self, prefix: &str, params: &dyn Parameterized) {
        params.visit(&mut |n, t| self.tensors.push(NamedTensor::new(&format!("{prefix}.{n}"), t)));
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor `{name}`")))?
            .tensor()
    }

    /// Loads every `prefix.*` tensor into `params`; every parameter of
    /// `params` must be present.
    pub fn load_params(&self, prefix: &str, params: &mut dyn Parameterized) -> Result<()> {
        for name in params.param_names() {
            let t = self.get(&format!("{prefix}.{name}"))?;
            params.set_param(&name, &t)?;
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("{} is not a checkpoint", path.display())));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}
