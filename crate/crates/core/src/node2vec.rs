//! Taxonomy node embeddings from second-order random walks and skip-gram
//! with negative sampling.
//!
//! Walks run on the undirected taxonomy graph. A step from `cur` (having
//! arrived from `prev`) weights each candidate `x` by `1/p` when `x == prev`,
//! `1` when `x` is adjacent to `prev`, and `1/q` otherwise.
//!
//! Initialization is either random (`type1`, uniform in `±0.5/d`) or
//! lexicalized (`type2`, the averaged word vectors of each node's scope
//! note). Training keeps separate input and output matrices; the input
//! matrix is returned.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use taxolink_numerics::{ops::sigmoid, tensor::dot, Categorical, Rng, Tensor};

use crate::encoders::{encode_scope_note, EmbeddingTable};
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub return_param_p: f64,
    pub inout_param_q: f64,
    pub window: usize,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    /// Initial SGD rate, decayed linearly to `1e-4 · lr` over all epochs.
    pub lr: f64,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walks_per_node: 10,
            walk_length: 80,
            return_param_p: 1.0,
            inout_param_q: 1.0,
            window: 10,
            negatives_per_positive: 5,
            epochs: 100,
            lr: 0.025,
            seed: 1,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walk_length < 2 {
            return Err(Error::Config("walk_length must be at least 2".into()));
        }
        if self.window < 1 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if !(self.return_param_p > 0.0 && self.inout_param_q > 0.0) {
            return Err(Error::Config("p and q must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("node2vec lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Type1,
    Type2,
    Gcn,
    File,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Type1 => "type1",
            NodeKind::Type2 => "type2",
            NodeKind::Gcn => "gcn",
            NodeKind::File => "file",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(NodeKind::Type1),
            "type2" => Ok(NodeKind::Type2),
            "gcn" => Ok(NodeKind::Gcn),
            "file" => Ok(NodeKind::File),
            other => Err(Error::Config(format!("unknown node embedding kind `{other}`"))),
        }
    }
}

/// One vector per taxonomy node, rows aligned to the node index.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub kind: NodeKind,
    pub matrix: Tensor,
}

impl NodeEmbeddings {
    pub fn new(kind: NodeKind, matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::Config("node embeddings must be a matrix".into()));
        }
        if !matrix.is_finite() {
            return Err(Error::Divergence("non-finite node embedding".into()));
        }
        Ok(Self { kind, matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, node: usize) -> &[f64] {
        self.matrix.row(node)
    }

    /// Writes the embedding text format with concept ids as tokens.
    pub fn write(&self, path: impl AsRef<Path>, tax: &Taxonomy) -> Result<()> {
        let ids: Vec<String> = (0..tax.len()).map(|i| tax.id(i).to_string()).collect();
        EmbeddingTable::write(path, &ids, &self.matrix)
    }

    /// Reads an embedding file and aligns its rows to `tax`. Every taxonomy
    /// node must be present.
    pub fn load(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<Self> {
        let table = EmbeddingTable::load(path.as_ref())?;
        let mut data = Vec::with_capacity(tax.len() * table.dim());
        for i in 0..tax.len() {
            let id = tax.id(i);
            if !table.contains(id) {
                return Err(Error::Integrity(format!(
                    "{} has no embedding for concept `{id}`",
                    path.as_ref().display()
                )));
            }
            data.extend_from_slice(table.lookup(id));
        }
        Self::new(NodeKind::File, Tensor::matrix(tax.len(), table.dim(), data)?)
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (u, v) = (self.row(a), self.row(b));
        let nu = dot(u, u).sqrt();
        let nv = dot(v, v).sqrt();
        if nu == 0.0 || nv == 0.0 {
            0.0
        } else {
            dot(u, v) / (nu * nv)
        }
    }
}

/// Biased next-step distribution from `cur` having arrived from `prev`.
/// Returns `None` when `cur` has no neighbours.
pub fn transition_distribution(
    tax: &Taxonomy,
    prev: usize,
    cur: usize,
    cfg: &WalkConfig,
) -> Option<Vec<(usize, f64)>> {
    let candidates = tax.neighbor_indices(cur);
    if candidates.is_empty() {
        return None;
    }
    let prev_neighbors = tax.neighbor_indices(prev);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&x| {
            if x == prev {
                1.0 / cfg.return_param_p
            } else if prev_neighbors.binary_search(&x).is_ok() {
                1.0
            } else {
                1.0 / cfg.inout_param_q
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    Some(
        candidates
            .iter()
            .zip(weights)
            .map(|(&x, w)| (x, w / total))
            .collect(),
    )
}

fn sample(dist: &[(usize, f64)], rng: &mut Rng) -> usize {
    let r = rng.uniform();
    let mut acc = 0.0;
    for &(x, p) in dist {
        acc += p;
        if r < acc {
            return x;
        }
    }
    dist.last().expect("non-empty distribution").0
}

fn walk_from(tax: &Taxonomy, start: usize, cfg: &WalkConfig, rng: &mut Rng) -> Vec<usize> {
    let mut walk = Vec::with_capacity(cfg.walk_length);
    walk.push(start);
    let first = tax.neighbor_indices(start);
    if first.is_empty() || cfg.walk_length < 2 {
        return walk;
    }
    walk.push(first[rng.below(first.len())]);
    while walk.len() < cfg.walk_length {
        let (prev, cur) = (walk[walk.len() - 2], walk[walk.len() - 1]);
        match transition_distribution(tax, prev, cur, cfg) {
            Some(dist) => walk.push(sample(&dist, rng)),
            None => break,
        }
    }
    walk
}

/// `walks_per_node` walks from every node, grouped by start node in index
/// order. Each start node draws from its own generator derived from
/// `cfg.seed`, so the result does not depend on scheduling.
pub fn generate_walks(tax: &Taxonomy, cfg: &WalkConfig) -> Vec<Vec<usize>> {
    let base = Rng::seeded(cfg.seed);
    let per_node: Vec<Vec<Vec<usize>>> = (0..tax.len())
        .into_par_iter()
        .map(|start| {
            let mut rng = base.derive(start as u64);
            (0..cfg.walks_per_node)
                .map(|_| walk_from(tax, start, cfg, &mut rng))
                .collect()
        })
        .collect();
    per_node.into_iter().flatten().collect()
}

pub fn init_embeddings(
    tax: &Taxonomy,
    kind: NodeKind,
    table: Option<&EmbeddingTable>,
    dim: usize,
    rng: &mut Rng,
) -> Result<NodeEmbeddings> {
    match kind {
        NodeKind::Type1 => {
            if dim == 0 {
                return Err(Error::Config("embedding dimension must be positive".into()));
            }
            let bound = 0.5 / dim as f64;
            let data = (0..tax.len() * dim)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            NodeEmbeddings::new(kind, Tensor::matrix(tax.len(), dim, data)?)
        }
        NodeKind::Type2 => {
            let table = table.ok_or_else(|| {
                Error::Config("type2 initialization needs a word embedding table".into())
            })?;
            if table.dim() != dim {
                return Err(Error::Config(format!(
                    "type2 dimension {dim} differs from embedding table dimension {}",
                    table.dim()
                )));
            }
            let rows: Vec<Vec<f64>> = tax
                .nodes()
                .iter()
                .map(|n| encode_scope_note(table, &n.scope_note))
                .collect();
            let matrix = if rows.is_empty() {
                Tensor::zeros(&[0, dim])
            } else {
                Tensor::from_rows(&rows)?
            };
            NodeEmbeddings::new(kind, matrix)
        }
        other => Err(Error::Config(format!(
            "`{other}` embeddings are not produced by random-walk initialization"
        ))),
    }
}

/// Ordered `(center, context)` pairs within `window` positions.
pub fn context_pairs(walk: &[usize], window: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..walk.len()).flat_map(move |i| {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(walk.len().saturating_sub(1));
        (lo..=hi).filter(move |&j| j != i).map(move |j| (walk[i], walk[j]))
    })
}

/// `−log σ(u·v) − Σₖ log σ(−u·vₖ)` for one center/context/negatives group.
pub fn negative_sampling_loss(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut loss = -log_sigmoid(dot(center, context));
    for neg in negatives {
        loss -= log_sigmoid(-dot(center, neg));
    }
    loss
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSamplingGrads {
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Analytic gradient of [`negative_sampling_loss`].
pub fn negative_sampling_grads(
    center: &[f64],
    context: &[f64],
    negatives: &[&[f64]],
) -> NegativeSamplingGrads {
    let g_pos = sigmoid(dot(center, context)) - 1.0;
    let mut g_center: Vec<f64> = context.iter().map(|v| g_pos * v).collect();
    let g_context = center.iter().map(|u| g_pos * u).collect();
    let mut g_negs = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let g = sigmoid(dot(center, neg));
        for (gc, v) in g_center.iter_mut().zip(neg.iter()) {
            *gc += g * v;
        }
        g_negs.push(center.iter().map(|u| g * u).collect());
    }
    NegativeSamplingGrads {
        center: g_center,
        context: g_context,
        negatives: g_negs,
    }
}

/// Unigram^0.75 distribution over walk occurrences.
fn negative_distribution(walks: &[Vec<usize>], n: usize) -> Result<Option<Categorical>> {
    let mut counts = vec![0usize; n];
    for w in walks {
        for &v in w {
            counts[v] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Ok(None);
    }
    let weights = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    Ok(Some(Categorical::new(weights)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramOutcome {
    pub embeddings: NodeEmbeddings,
    /// Mean loss per training pair, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// SGD on the negative-sampling skip-gram objective over `walks`.
pub fn train_skipgram(
    walks: &[Vec<usize>],
    init: &NodeEmbeddings,
    cfg: &WalkConfig,
) -> Result<SkipGramOutcome> {
    cfg.validate()?;
    let n = init.len();
    let d = init.dim();
    if let Some(bad) = walks.iter().flatten().find(|&&v| v >= n) {
        return Err(Error::Config(format!("walk node {bad} outside {n} embeddings")));
    }
    let mut input = init.matrix.clone();
    let mut output = Tensor::zeros(&[n, d]);
    let pairs_per_epoch: usize = walks
        .iter()
        .map(|w| context_pairs(w, cfg.window).count())
        .sum();
    let total = (pairs_per_epoch * cfg.epochs).max(1) as f64;
    let negatives = negative_distribution(walks, n)?;
    let mut rng = Rng::seeded(cfg.seed).derive(u64::MAX);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut processed = 0usize;
    let mut grad_center = vec![0.0; d];
    let mut negs = Vec::with_capacity(cfg.negatives_per_positive);

    let mut u = vec![0.0; d];
    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for walk in walks {
            for i in 0..walk.len() {
                let center = walk[i];
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(walk.len() - 1);
                for (j, &context) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = cfg.lr * (1.0 - processed as f64 / total).max(1e-4);
                    processed += 1;
                    negs.clear();
                    if let Some(dist) = &negatives {
                        for _ in 0..cfg.negatives_per_positive {
                            let k = dist.draw(&mut rng);
                            if k != context {
                                negs.push(k);
                            }
                        }
                    }
                    grad_center.iter_mut().for_each(|g| *g = 0.0);
                    u.copy_from_slice(input.row(center));
                    let mut pair_likelihood = 1.0;
                    let targets = std::iter::once((context, 1.0)).chain(negs.iter().map(|&k| (k, 0.0)));
                    for (target, label) in targets {
                        let v = output.row_mut(target);
                        let s = sigmoid(dot(&u, v));
                        let likelihood = if label == 1.0 { s } else { 1.0 - s };
                        // one log per pair; the floor keeps the product above underflow
                        pair_likelihood *= likelihood.max(1e-50);
                        // d(loss)/d(score) = σ(score) − label
                        let g = s - label;
                        for ((gc, vj), uj) in grad_center.iter_mut().zip(v.iter_mut()).zip(&u) {
                            *gc += g * *vj;
                            *vj -= lr * g * uj;
                        }
                    }
                    for (x, g) in input.row_mut(center).iter_mut().zip(&grad_center) {
                        *x -= lr * g;
                    }
                    loss_sum -= pair_likelihood.ln();
                }
            }
        }
        let mean = loss_sum / pairs_per_epoch.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence("skip-gram loss is not finite".into()));
        }
        epoch_losses.push(mean);
    }
    Ok(SkipGramOutcome {
        embeddings: NodeEmbeddings::new(init.kind, input)?,
        epoch_losses,
    })
}

/// Walks, initialization and skip-gram training in one call.
pub fn embed_taxonomy(
    tax: &Taxonomy,
    kind: NodeKind,
    table: Option<&EmbeddingTable>,
    dim: usize,
    cfg: &WalkConfig,
) -> Result<SkipGramOutcome> {
    cfg.validate()?;
    let mut rng = Rng::seeded(cfg.seed);
    let init = init_embeddings(tax, kind, table, dim, &mut rng)?;
    let walks = generate_walks(tax, cfg);
    train_skipgram(&walks, &init, cfg)
}
