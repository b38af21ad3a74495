//! Where the linker's node embeddings come from.
//!
//! Every source implements [`NodeEncoder`] and is registered by name in a
//! [`NodeSourceRegistry`]. The built-in sources are:
//!
//! - `type1`: skip-gram on random walks from random initialization
//! - `type2`: the same, initialized from scope-note encodings
//! - `gcn-live`: a GCN over scope-note encodings, trained with the linker
//! - `file`: vectors read from an embedding file
//!
//! Static sources are frozen unless fine-tuning is requested, in which case
//! the node matrix itself becomes a trainable parameter.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use taxolink_numerics::{Grads, Parameterized, Rng, Tensor};

use crate::encoders::{encode_scope_note, EmbeddingTable};
use crate::error::{Error, Result};
use crate::gcn::{gcn_backward, gcn_encode, GcnCache, GcnParams};
use crate::node2vec::{embed_taxonomy, NodeEmbeddings, NodeKind, WalkConfig};
use crate::taxonomy::{Adjacency, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnConfig {
    pub layers: usize,
    pub hidden: usize,
    pub output: usize,
    pub self_loops: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 2048,
            output: 1024,
            self_loops: true,
        }
    }
}

impl GcnConfig {
    pub fn dims(&self, input: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.hidden, self.layers.saturating_sub(1)));
        dims.push(self.output);
        dims
    }
}

/// Everything a node source may need to build itself.
pub struct NodeSourceContext<'a> {
    pub taxonomy: &'a Taxonomy,
    /// Static word table, used for scope-note encodings.
    pub table: Option<&'a EmbeddingTable>,
    /// Dimension of `type1` embeddings.
    pub dim: usize,
    pub walk: &'a WalkConfig,
    pub gcn: &'a GcnConfig,
    pub finetune: bool,
    pub file: Option<PathBuf>,
    pub seed: u64,
}

impl NodeSourceContext<'_> {
    fn scope_notes(&self) -> Result<Tensor> {
        let table = self.table.ok_or_else(|| {
            Error::Config("scope-note encodings need a static embedding table".into())
        })?;
        let rows: Vec<Vec<f64>> = self
            .taxonomy
            .nodes()
            .iter()
            .map(|n| encode_scope_note(table, &n.scope_note))
            .collect();
        Ok(Tensor::from_rows(&rows)?)
    }
}

/// A producer of one embedding per taxonomy node.
pub trait NodeEncoder: Send {
    fn kind(&self) -> NodeKind;

    fn dim(&self) -> usize;

    /// Current node matrix, rows aligned to the taxonomy node index.
    /// Trainable sources cache what their backward pass needs.
    fn encode(&mut self) -> Result<Tensor>;

    /// Gradients of this source's parameters given `∂loss/∂nodes` from the
    /// latest [`encode`](NodeEncoder::encode). Frozen sources return nothing.
    fn backward(&mut self, d_nodes: &Tensor) -> Result<Grads>;

    /// Trainable parameters, if any.
    fn params_mut(&mut self) -> Option<&mut dyn Parameterized>;

    fn params(&self) -> Option<&dyn Parameterized>;

    /// Snapshot of the current embeddings.
    fn embeddings(&mut self) -> Result<NodeEmbeddings> {
        let kind = self.kind();
        NodeEmbeddings::new(kind, self.encode()?)
    }
}

impl fmt::Debug for dyn NodeEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeEncoder({}, dim {})", self.kind(), self.dim())
    }
}

/// A fixed node matrix, optionally fine-tuned as a free parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticNodes {
    kind: NodeKind,
    matrix: Tensor,
    finetune: bool,
}

impl StaticNodes {
    pub fn new(embeddings: NodeEmbeddings, finetune: bool) -> Self {
        Self {
            kind: embeddings.kind,
            matrix: embeddings.matrix,
            finetune,
        }
    }
}

impl Parameterized for StaticNodes {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("matrix", &self.matrix);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("matrix", &mut self.matrix);
    }
}

impl NodeEncoder for StaticNodes {
    fn kind(&self) -> NodeKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.matrix.cols()
    }

    fn encode(&mut self) -> Result<Tensor> {
        Ok(self.matrix.clone())
    }

    fn backward(&mut self, d_nodes: &Tensor) -> Result<Grads> {
        let mut g = Grads::new();
        if self.finetune {
            g.accumulate("matrix", d_nodes, 1.0);
        }
        Ok(g)
    }

    fn params_mut(&mut self) -> Option<&mut dyn Parameterized> {
        if self.finetune {
            Some(self)
        } else {
            None
        }
    }

    fn params(&self) -> Option<&dyn Parameterized> {
        if self.finetune {
            Some(self)
        } else {
            None
        }
    }
}

/// GCN over fixed scope-note inputs; its weights train with the linker.
#[derive(Debug, Clone)]
pub struct GcnLive {
    adjacency: Adjacency,
    inputs: Tensor,
    params: GcnParams,
    cache: Option<GcnCache>,
}

impl GcnLive {
    pub fn new(adjacency: Adjacency, inputs: Tensor, params: GcnParams) -> Result<Self> {
        if inputs.rows() != adjacency.len() || inputs.cols() != params.input_dim() {
            return Err(Error::Config(format!(
                "GCN inputs {:?} do not fit {} nodes and input size {}",
                inputs.shape(),
                adjacency.len(),
                params.input_dim()
            )));
        }
        Ok(Self {
            adjacency,
            inputs,
            params,
            cache: None,
        })
    }

    pub fn gcn_params(&self) -> &GcnParams {
        &self.params
    }
}

impl NodeEncoder for GcnLive {
    fn kind(&self) -> NodeKind {
        NodeKind::Gcn
    }

    fn dim(&self) -> usize {
        self.params.output_dim()
    }

    fn encode(&mut self) -> Result<Tensor> {
        let (out, cache) = gcn_encode(&self.adjacency, &self.params, &self.inputs)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, d_nodes: &Tensor) -> Result<Grads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Training("GCN backward before forward".into()))?;
        let g = gcn_backward(&self.adjacency, &self.params, cache, d_nodes)?;
        Ok(Grads::collect(None, &g))
    }

    fn params_mut(&mut self) -> Option<&mut dyn Parameterized> {
        Some(&mut self.params)
    }

    fn params(&self) -> Option<&dyn Parameterized> {
        Some(&self.params)
    }
}

pub type NodeSourceFactory = fn(&NodeSourceContext<'_>) -> Result<Box<dyn NodeEncoder>>;

/// Name → constructor map for node sources.
#[derive(Clone)]
pub struct NodeSourceRegistry {
    entries: BTreeMap<String, NodeSourceFactory>,
}

impl Default for NodeSourceRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl NodeSourceRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("type1", build_type1);
        r.register("type2", build_type2);
        r.register("gcn-live", build_gcn_live);
        r.register("file", build_file);
        r
    }

    pub fn register(&mut self, name: &str, factory: NodeSourceFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, ctx: &NodeSourceContext<'_>) -> Result<Box<dyn NodeEncoder>> {
        let factory = self.entries.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown node source `{name}` (known: {})",
                self.names().join(", ")
            ))
        })?;
        factory(ctx)
    }
}

fn walk_config(ctx: &NodeSourceContext<'_>) -> WalkConfig {
    WalkConfig {
        seed: ctx.seed,
        ..ctx.walk.clone()
    }
}

fn build_type1(ctx: &NodeSourceContext<'_>) -> Result<Box<dyn NodeEncoder>> {
    let out = embed_taxonomy(ctx.taxonomy, NodeKind::Type1, None, ctx.dim, &walk_config(ctx))?;
    log::info!("type1 skip-gram losses: {:?}", out.epoch_losses.last());
    Ok(Box::new(StaticNodes::new(out.embeddings, ctx.finetune)))
}

fn build_type2(ctx: &NodeSourceContext<'_>) -> Result<Box<dyn NodeEncoder>> {
    let table = ctx
        .table
        .ok_or_else(|| Error::Config("type2 node embeddings need a static embedding table".into()))?;
    let out = embed_taxonomy(
        ctx.taxonomy,
        NodeKind::Type2,
        Some(table),
        table.dim(),
        &walk_config(ctx),
    )?;
    log::info!("type2 skip-gram losses: {:?}", out.epoch_losses.last());
    Ok(Box::new(StaticNodes::new(out.embeddings, ctx.finetune)))
}

fn build_gcn_live(ctx: &NodeSourceContext<'_>) -> Result<Box<dyn NodeEncoder>> {
    let inputs = ctx.scope_notes()?;
    let mut rng = Rng::seeded(ctx.seed).derive(0x6c6e);
    let params = GcnParams::new(&ctx.gcn.dims(inputs.cols()), &mut rng)?;
    Ok(Box::new(GcnLive::new(
        ctx.taxonomy.adjacency(ctx.gcn.self_loops),
        inputs,
        params,
    )?))
}

fn build_file(ctx: &NodeSourceContext<'_>) -> Result<Box<dyn NodeEncoder>> {
    let path = ctx
        .file
        .as_ref()
        .ok_or_else(|| Error::Config("the `file` node source needs a node embedding path".into()))?;
    let e = NodeEmbeddings::load(path, ctx.taxonomy)?;
    Ok(Box::new(StaticNodes::new(e, ctx.finetune)))
}
