//! Run configuration: one TOML table per module plus file paths and the seed.
//!
//! Relative paths in a config file resolve against the file's directory;
//! paths given as overrides resolve against the working directory. After
//! loading every path is absolute, so a written manifest can be re-run from
//! anywhere.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linker::LinkerConfig;
use crate::mtl::MtlConfig;
use crate::ner::NerConfig;
use crate::node2vec::WalkConfig;
use crate::node_source::GcnConfig;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub taxonomy: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// OMIM → taxonomy id pairs.
    pub omim: Option<PathBuf>,
    /// Static word vectors in text format.
    pub embeddings: Option<PathBuf>,
    /// Per-token contextual vectors.
    pub contextual: Option<PathBuf>,
    /// Node vectors for the `file` node source.
    pub node_embeddings: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            taxonomy: None,
            train: None,
            validation: None,
            test: None,
            omim: None,
            embeddings: None,
            contextual: None,
            node_embeddings: None,
            out: PathBuf::from("runs/latest"),
        }
    }
}

impl Paths {
    fn inputs(&self) -> [(&'static str, Option<&PathBuf>); 8] {
        [
            ("taxonomy", self.taxonomy.as_ref()),
            ("train", self.train.as_ref()),
            ("validation", self.validation.as_ref()),
            ("test", self.test.as_ref()),
            ("omim", self.omim.as_ref()),
            ("embeddings", self.embeddings.as_ref()),
            ("contextual", self.contextual.as_ref()),
            ("node_embeddings", self.node_embeddings.as_ref()),
        ]
    }

    fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
            Ok(())
        };
        for p in [
            &mut self.taxonomy,
            &mut self.train,
            &mut self.validation,
            &mut self.test,
            &mut self.omim,
            &mut self.embeddings,
            &mut self.contextual,
            &mut self.node_embeddings,
        ]
        .into_iter()
        .flatten()
        {
            abs(p)?;
        }
        abs(&mut self.out)
    }

    /// The path or a config error naming the missing key.
    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("paths.{key} is not set")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds every random choice of a run, random walks included.
    pub seed: u64,
    /// Registered node source name.
    pub node_source: String,
    /// Dimension of `type1` node embeddings.
    pub node_dim: usize,
    /// Train fixed node embeddings together with the linker.
    pub finetune_nodes: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            node_source: "gcn-live".into(),
            node_dim: 1024,
            finetune_nodes: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub run: RunSection,
    pub node2vec: WalkConfig,
    pub gcn: GcnConfig,
    pub linker: LinkerConfig,
    pub ner: NerConfig,
    pub mtl: MtlConfig,
}

impl RunConfig {
    /// Reads a config file or a run manifest, applies `key=value` overrides
    /// and makes every path absolute.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut table: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                if let Some(toml::Value::Table(inner)) = table.remove("config") {
                    table = inner;
                }
                let base = path.parent().unwrap_or(Path::new(""));
                rebase_paths(&mut table, base);
                table
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.paths.absolutize()?;
        cfg.node2vec.seed = cfg.run.seed;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks hyperparameters and that every configured input file exists.
    pub fn validate(&self) -> Result<()> {
        for (key, path) in self.paths.inputs() {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Config(format!("paths.{key}: {} does not exist", p.display())));
                }
            }
        }
        self.node2vec.validate()?;
        self.ner.validate()?;
        self.mtl.validate()?;
        if self.linker.batch_size == 0 || self.linker.k == 0 {
            return Err(Error::Config("linker batch_size and k must be positive".into()));
        }
        if !(self.linker.lr > 0.0) {
            return Err(Error::Config(format!("linker lr must be > 0, got {}", self.linker.lr)));
        }
        if self.gcn.layers == 0 {
            return Err(Error::Config("gcn needs at least one layer".into()));
        }
        Ok(())
    }
}

fn rebase_paths(table: &mut toml::Table, base: &Path) {
    let Some(toml::Value::Table(paths)) = table.get_mut("paths") else {
        return;
    };
    for (_, value) in paths.iter_mut() {
        let rebased = match value {
            toml::Value::String(s) if Path::new(s.as_str()).is_relative() => base.join(s.as_str()),
            _ => continue,
        };
        *value = toml::Value::String(rebased.to_string_lossy().into_owned());
    }
}

/// Sets a dotted key; the value parses as TOML and falls back to a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Config snapshot, seed and results of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub command: String,
    pub seed: u64,
    /// Directory holding the run's files.
    pub out: PathBuf,
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    /// Files written by the run, relative to the output directory.
    pub files: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, out: &Path) -> Self {
        Self {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            seed: config.run.seed,
            out: out.to_path_buf(),
            metrics: BTreeMap::new(),
            counts: BTreeMap::new(),
            files: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn file_name(&self) -> String {
        format!("{}.manifest.toml", self.command)
    }
}
