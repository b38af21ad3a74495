//! Bilinear entity linker normalized over every taxonomy node.
//!
//! `score(y) = mᵀ W e_y` and `p(y | m) = softmax(score)` over all `n` nodes,
//! with no candidate pre-selection. Ranks are 1-based; ties go to the lower
//! node index.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use taxolink_numerics::tensor::{gemv_acc, gemv_t_acc, outer_acc};
use taxolink_numerics::{softmax, Adam, Grads, ParamGroup, Parameterized, Rng, Tensor};

use crate::error::{Error, Result};
use crate::node_source::NodeEncoder;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkerParams {
    /// `d_mention × d_node`.
    pub w: Tensor,
}

impl LinkerParams {
    /// Identity on the top-left block, zeros elsewhere.
    pub fn identity_padded(d_mention: usize, d_node: usize) -> Self {
        let mut w = Tensor::zeros(&[d_mention, d_node]);
        for i in 0..d_mention.min(d_node) {
            w.set(i, i, 1.0);
        }
        Self { w }
    }

    pub fn d_mention(&self) -> usize {
        self.w.rows()
    }

    pub fn d_node(&self) -> usize {
        self.w.cols()
    }
}

impl Parameterized for LinkerParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w", &self.w);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w", &mut self.w);
    }
}

fn check_dims(mention: &[f64], nodes: &Tensor, params: &LinkerParams) -> Result<()> {
    if mention.len() != params.d_mention() || nodes.cols() != params.d_node() {
        return Err(Error::Config(format!(
            "linker expects mention dim {} and node dim {}, got {} and {}",
            params.d_mention(),
            params.d_node(),
            mention.len(),
            nodes.cols()
        )));
    }
    if nodes.rows() == 0 {
        return Err(Error::Config("linker needs at least one node".into()));
    }
    Ok(())
}

/// `Wᵀm`, the mention projected into node space.
fn project(mention: &[f64], params: &LinkerParams) -> Vec<f64> {
    let mut v = vec![0.0; params.d_node()];
    gemv_t_acc(params.w.data(), params.d_mention(), params.d_node(), mention, &mut v);
    v
}

/// Raw bilinear scores for every node.
pub fn link_scores(mention: &[f64], nodes: &Tensor, params: &LinkerParams) -> Result<Vec<f64>> {
    check_dims(mention, nodes, params)?;
    let v = project(mention, params);
    let mut scores = vec![0.0; nodes.rows()];
    gemv_acc(nodes.data(), nodes.rows(), nodes.cols(), &v, &mut scores);
    Ok(scores)
}

pub fn link_probabilities(mention: &[f64], nodes: &Tensor, params: &LinkerParams) -> Result<Vec<f64>> {
    Ok(softmax(&link_scores(mention, nodes, params)?)?)
}

/// 1-based rank of `gold` under `scores`, ties resolved by node index.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(y, &s)| s > g || (s == g && y < gold))
        .count()
}

/// A mention feature vector with its gold node index.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkExample {
    pub features: Vec<f64>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkGrads {
    pub w: LinkerParams,
    pub nodes: Tensor,
    /// `∂loss/∂m` per example, in input order.
    pub mentions: Vec<Vec<f64>>,
}

/// Mean negative log-likelihood of the gold nodes.
pub fn linker_nll(examples: &[LinkExample], nodes: &Tensor, params: &LinkerParams) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Training("linker loss over zero examples".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let scores = link_scores(&ex.features, nodes, params)?;
        total += taxolink_numerics::log_sum_exp(&scores)? - scores[ex.gold];
    }
    Ok(total / examples.len() as f64)
}

/// Mean NLL and its gradients with respect to `W`, the node matrix and each
/// mention vector. With `g = p − onehot(gold)` and `v = Wᵀm`:
/// `∂W = m ⊗ (Nᵀg)`, `∂N = g ⊗ v`, `∂m = W(Nᵀg)`.
pub fn linker_nll_grads(
    examples: &[LinkExample],
    nodes: &Tensor,
    params: &LinkerParams,
) -> Result<(f64, LinkGrads)> {
    if examples.is_empty() {
        return Err(Error::Training("linker loss over zero examples".into()));
    }
    let (n, dn, dm) = (nodes.rows(), params.d_node(), params.d_mention());
    let scale = 1.0 / examples.len() as f64;
    let mut grads = LinkGrads {
        w: LinkerParams { w: Tensor::zeros(&[dm, dn]) },
        nodes: Tensor::zeros(&[n, dn]),
        mentions: Vec::with_capacity(examples.len()),
    };
    let mut total = 0.0;
    for ex in examples {
        let m = &ex.features;
        check_dims(m, nodes, params)?;
        let v = project(m, params);
        let mut scores = vec![0.0; n];
        gemv_acc(nodes.data(), n, dn, &v, &mut scores);
        total += taxolink_numerics::log_sum_exp(&scores)? - scores[ex.gold];
        let mut g = softmax(&scores)?;
        g[ex.gold] -= 1.0;
        g.iter_mut().for_each(|x| *x *= scale);
        let mut ntg = vec![0.0; dn];
        gemv_t_acc(nodes.data(), n, dn, &g, &mut ntg);
        outer_acc(grads.w.w.data_mut(), m, &ntg);
        outer_acc(grads.nodes.data_mut(), &g, &v);
        let mut dmention = vec![0.0; dm];
        gemv_acc(params.w.data(), dm, dn, &ntg, &mut dmention);
        grads.mentions.push(dmention);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::Divergence("linker loss is not finite".into()));
    }
    Ok((loss, grads))
}

/// Identifies a mention in a document by char offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRef {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPrediction {
    pub mention: MentionRef,
    /// Top-k `(concept id, probability)` in descending probability.
    pub ranked: Vec<(String, f64)>,
    pub gold: Option<String>,
    /// Rank over the full inventory, computed before truncation.
    pub rank_of_gold: Option<usize>,
}

/// Ranks every node for one mention and keeps the top `k`.
pub fn rank_for_mention(
    mention: MentionRef,
    features: &[f64],
    gold: Option<usize>,
    nodes: &Tensor,
    params: &LinkerParams,
    tax: &Taxonomy,
    k: usize,
) -> Result<LinkPrediction> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let scores = link_scores(features, nodes, params)?;
    let probs = softmax(&scores)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps ascending node index among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let ranked = order
        .iter()
        .take(k)
        .map(|&y| (tax.id(y).to_string(), probs[y]))
        .collect();
    Ok(LinkPrediction {
        mention,
        ranked,
        gold: gold.map(|g| tax.id(g).to_string()),
        rank_of_gold: gold.map(|g| rank_of(&scores, g)),
    })
}

/// Gold ranks for every example, computed in parallel.
pub fn gold_ranks(examples: &[LinkExample], nodes: &Tensor, params: &LinkerParams) -> Result<Vec<usize>> {
    examples
        .par_iter()
        .map(|ex| Ok(rank_of(&link_scores(&ex.features, nodes, params)?, ex.gold)))
        .collect()
}

/// Mean NLL and MRR over `examples`, computed in parallel.
pub fn evaluate_examples(
    examples: &[LinkExample],
    nodes: &Tensor,
    params: &LinkerParams,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let per: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let scores = link_scores(&ex.features, nodes, params)?;
            let nll = taxolink_numerics::log_sum_exp(&scores)? - scores[ex.gold];
            Ok((nll, rank_of(&scores, ex.gold)))
        })
        .collect::<Result<_>>()?;
    let n = examples.len() as f64;
    let nll = per.iter().map(|p| p.0).sum::<f64>() / n;
    let mrr = per.iter().map(|p| 1.0 / p.1 as f64).sum::<f64>() / n;
    Ok((nll, mrr))
}

/// One line per mention:
/// `doc_id  start  end  gold_id  rank_of_gold  top1_id  top1_prob`.
pub fn write_predictions(path: impl AsRef<Path>, predictions: &[LinkPrediction]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in predictions {
        let (top, prob) = p.ranked.first().map_or(("-", 0.0), |(id, pr)| (id.as_str(), *pr));
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
            p.mention.doc_id,
            p.mention.start,
            p.mention.end,
            p.gold.as_deref().unwrap_or("-"),
            p.rank_of_gold.map_or("-".to_string(), |r| r.to_string()),
            top,
            prob
        )
        .expect("write to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 runs every epoch.
    pub patience: usize,
    pub k: usize,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-3,
            batch_size: 32,
            patience: 0,
            k: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkerEpoch {
    pub epoch: usize,
    /// Training NLL after the epoch's updates.
    pub loss: f64,
    pub train_mrr: f64,
    pub validation_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LinkerOutcome {
    pub params: LinkerParams,
    /// Node matrix of the selected epoch.
    pub nodes: Tensor,
    /// Training NLL before any update.
    pub initial_loss: f64,
    pub history: Vec<LinkerEpoch>,
    /// 0 when the initial parameters were kept.
    pub best_epoch: usize,
    /// Trainable node-source parameters of the selected epoch.
    pub node_params: Vec<(String, Tensor)>,
}

pub(crate) fn snapshot(encoder: &dyn NodeEncoder) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    if let Some(p) = encoder.params() {
        p.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
    }
    out
}

pub(crate) fn restore(encoder: &mut dyn NodeEncoder, saved: &[(String, Tensor)]) -> Result<()> {
    if let Some(p) = encoder.params_mut() {
        for (n, t) in saved {
            p.set_param(n, t)?;
        }
    }
    Ok(())
}

/// Mini-batch Adam on the mean linker NLL. Model selection keeps the epoch
/// with the best validation MRR (training MRR when no validation set).
/// Gradients reach the node source when it is trainable.
pub fn train_linker(
    train: &[LinkExample],
    validation: Option<&[LinkExample]>,
    init: LinkerParams,
    encoder: &mut dyn NodeEncoder,
    cfg: &LinkerConfig,
    seed: u64,
) -> Result<LinkerOutcome> {
    if train.is_empty() {
        return Err(Error::Training("no resolved mentions to train the linker on".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = init;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = Rng::seeded(seed).derive(0x656c);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let select = |nodes: &Tensor, params: &LinkerParams| -> Result<(f64, f64, Option<f64>)> {
        let (loss, tr) = evaluate_examples(train, nodes, params)?;
        let va = match validation {
            Some(v) if !v.is_empty() => Some(evaluate_examples(v, nodes, params)?.1),
            _ => None,
        };
        Ok((loss, tr, va))
    };

    let nodes0 = encoder.encode()?;
    let (initial_loss, tr0, va0) = select(&nodes0, &params)?;
    let mut best_score = va0.unwrap_or(tr0);
    let mut best = (params.clone(), nodes0, 0usize, snapshot(encoder));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LinkExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let nodes = encoder.encode()?;
            let (_, g) = linker_nll_grads(&batch, &nodes, &params)?;
            let mut grads = Grads::collect(Some("linker"), &g.w);
            let node_grads = encoder.backward(&g.nodes)?;
            for (name, t) in node_grads.iter() {
                grads.accumulate(&format!("nodes.{name}"), t, 1.0);
            }
            let mut group = ParamGroup::new().with("linker", &mut params);
            if let Some(p) = encoder.params_mut() {
                group.push("nodes", p);
            }
            adam.step(&mut group, &grads).map_err(Error::from)?;
        }
        let nodes = encoder.encode()?;
        let (loss, tr, va) = select(&nodes, &params)?;
        log::debug!("linker epoch {epoch}: loss {loss:.6} train MRR {tr:.4} val MRR {va:?}");
        history.push(LinkerEpoch {
            epoch,
            loss,
            train_mrr: tr,
            validation_mrr: va,
        });
        let score = va.unwrap_or(tr);
        if score > best_score {
            best_score = score;
            best = (params.clone(), nodes, epoch, snapshot(encoder));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log::info!("linker early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (params, nodes, best_epoch, node_params) = best;
    restore(encoder, &node_params)?;
    Ok(LinkerOutcome {
        params,
        nodes,
        initial_loss,
        history,
        best_epoch,
        node_params,
    })
}
