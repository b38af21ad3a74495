//! Joint tagging and linking over a shared biLSTM encoder.
//!
//! Mention features for the linker are averages of the tagger's biLSTM
//! states over the mention span, so linking gradients flow into the shared
//! encoder. Losses are either summed per batch (`sum`, with the linking loss
//! weighted by `el_weight`) or applied on alternating batches (`alternate`).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use taxolink_numerics::{Grads, Tensor};

use crate::encoders::{pool_rows, MentionEncoding};
use crate::error::{Error, Result};
use crate::linker::{
    gold_ranks, linker_nll_grads, rank_for_mention, restore, snapshot, LinkExample, LinkPrediction, LinkerParams,
    MentionRef,
};
use crate::metrics::{self, precision_at_k_ranks, EvalReport, Task};
use crate::ner::train::{evaluate_tagger, train_tagger, NerConfig, TaggedSentence, TaggerOutcome};
use crate::ner::NerModel;
use crate::node_source::NodeEncoder;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMix {
    #[default]
    Sum,
    Alternate,
}

impl fmt::Display for LossMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMix::Sum => "sum",
            LossMix::Alternate => "alternate",
        })
    }
}

impl FromStr for LossMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(LossMix::Sum),
            "alternate" => Ok(LossMix::Alternate),
            other => Err(Error::Config(format!("unknown loss mix `{other}` (sum, alternate)"))),
        }
    }
}

/// Where the linking head takes mention vectors from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionFeatures {
    /// Pooled shared biLSTM states.
    #[default]
    Shared,
    /// Pooled contextual-file vectors; the head then leaves the encoder alone.
    Contextual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtlConfig {
    pub el_weight: f64,
    pub loss_mix: LossMix,
    pub features: MentionFeatures,
    /// Candidates kept per mention in prediction dumps.
    pub k: usize,
}

impl Default for MtlConfig {
    fn default() -> Self {
        Self {
            el_weight: 1.0,
            loss_mix: LossMix::Sum,
            features: MentionFeatures::Shared,
            k: 30,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.el_weight >= 0.0 && self.el_weight.is_finite()) {
            return Err(Error::Config(format!("el_weight must be finite and >= 0, got {}", self.el_weight)));
        }
        if self.k == 0 {
            return Err(Error::Config("mtl k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Average of the shared states over a token span.
pub fn shared_mention_features(hidden: &Tensor, span: Range<usize>) -> Result<MentionEncoding> {
    pool_rows(hidden, span).map(|vector| MentionEncoding { vector })
}

pub(crate) struct HeadGrads {
    /// Weighted linking loss.
    pub loss: f64,
    /// `linker.*` and `nodes.*`.
    pub grads: Grads,
    /// Per-sentence `∂loss/∂states`.
    pub d_states: Vec<Option<Tensor>>,
}

/// Saved head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub linker: LinkerParams,
    pub nodes: Vec<(String, Tensor)>,
}

/// The linking half of the joint model.
pub struct ElHead {
    pub linker: LinkerParams,
    pub nodes: Box<dyn NodeEncoder>,
    pub el_weight: f64,
    pub loss_mix: LossMix,
    pub features: MentionFeatures,
}

impl fmt::Debug for ElHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ElHead")
            .field("linker", &self.linker.w.shape())
            .field("nodes", &self.nodes)
            .field("el_weight", &self.el_weight)
            .field("loss_mix", &self.loss_mix)
            .field("features", &self.features)
            .finish()
    }
}

pub(crate) fn mention_features(features: MentionFeatures, sentence: &TaggedSentence, states: &Tensor, span: Range<usize>) -> Result<Vec<f64>> {
    match features {
        MentionFeatures::Shared => Ok(shared_mention_features(states, span)?.vector),
        MentionFeatures::Contextual => {
            let ctx = sentence.context.as_ref().ok_or_else(|| {
                Error::Config("contextual mention features need a contextual encodings file".into())
            })?;
            pool_rows(ctx, span)
        }
    }
}

/// Mention position inside a batch or data set, with its example.
type Located = (usize, Range<usize>, LinkExample);

impl ElHead {
    /// Head with an identity-padded bilinear map from `mention_dim` features.
    pub fn new(mention_dim: usize, nodes: Box<dyn NodeEncoder>, cfg: &MtlConfig) -> Result<Self> {
        cfg.validate()?;
        let linker = LinkerParams::identity_padded(mention_dim, nodes.dim());
        Ok(Self {
            linker,
            nodes,
            el_weight: cfg.el_weight,
            loss_mix: cfg.loss_mix,
            features: cfg.features,
        })
    }

    fn locate(&self, batch: &[&TaggedSentence], states: &[&Tensor]) -> Result<Vec<Located>> {
        let mut out = Vec::new();
        for (i, (s, h)) in batch.iter().zip(states).enumerate() {
            for (range, gold) in &s.links {
                let features = mention_features(self.features, s, h, range.clone())?;
                out.push((i, range.clone(), LinkExample { features, gold: *gold }));
            }
        }
        Ok(out)
    }

    /// Weighted mean mention NLL of a batch and its gradients; `None` when
    /// the batch has no linked mention.
    pub(crate) fn loss_grads(&mut self, batch: &[&TaggedSentence], states: &[&Tensor]) -> Result<Option<HeadGrads>> {
        let located = self.locate(batch, states)?;
        if located.is_empty() {
            return Ok(None);
        }
        let examples: Vec<LinkExample> = located.iter().map(|l| l.2.clone()).collect();
        let nodes = self.nodes.encode()?;
        let (loss, mut g) = linker_nll_grads(&examples, &nodes, &self.linker)?;
        let w = self.el_weight;
        g.w.w.scale(w);
        g.nodes.scale(w);
        let mut grads = Grads::collect(Some("linker"), &g.w);
        for (name, t) in self.nodes.backward(&g.nodes)?.iter() {
            grads.accumulate(&format!("nodes.{name}"), t, 1.0);
        }
        let mut d_states: Vec<Option<Tensor>> = vec![None; batch.len()];
        if self.features == MentionFeatures::Shared {
            for ((i, range, _), dm) in located.iter().zip(&g.mentions) {
                let ds = d_states[*i].get_or_insert_with(|| Tensor::zeros(states[*i].shape()));
                let share = w / range.len() as f64;
                for r in range.clone() {
                    for (a, b) in ds.row_mut(r).iter_mut().zip(dm) {
                        *a += share * b;
                    }
                }
            }
        }
        Ok(Some(HeadGrads {
            loss: w * loss,
            grads,
            d_states,
        }))
    }

    /// Linked mentions of `data` with features from dropout-free states.
    pub fn examples(&self, model: &NerModel, data: &[TaggedSentence]) -> Result<Vec<Located>> {
        let features = self.features;
        let per: Vec<Vec<Located>> = data
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                if s.links.is_empty() {
                    return Ok(Vec::new());
                }
                let states = model.states(&s.input)?;
                let mut out = Vec::with_capacity(s.links.len());
                for (range, gold) in &s.links {
                    let features = mention_features(features, s, &states, range.clone())?;
                    out.push((i, range.clone(), LinkExample { features, gold: *gold }));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    }

    /// Gold ranks of every linked mention.
    pub fn ranks(&mut self, model: &NerModel, data: &[TaggedSentence]) -> Result<Vec<usize>> {
        let examples: Vec<LinkExample> = self.examples(model, data)?.into_iter().map(|l| l.2).collect();
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        let nodes = self.nodes.encode()?;
        gold_ranks(&examples, &nodes, &self.linker)
    }

    /// MRR over linked mentions; `None` when there are none.
    pub fn mrr(&mut self, model: &NerModel, data: &[TaggedSentence]) -> Result<Option<f64>> {
        let ranks = self.ranks(model, data)?;
        if ranks.is_empty() {
            return Ok(None);
        }
        metrics::mrr(&ranks).map(Some)
    }

    pub fn predictions(
        &mut self,
        model: &NerModel,
        data: &[TaggedSentence],
        tax: &Taxonomy,
        k: usize,
    ) -> Result<Vec<LinkPrediction>> {
        let located = self.examples(model, data)?;
        let nodes = self.nodes.encode()?;
        located
            .into_iter()
            .map(|(i, range, ex)| {
                let span = data[i].sentence.char_span(&range);
                let mention = MentionRef {
                    doc_id: data[i].sentence.doc_id.clone(),
                    start: span.start,
                    end: span.end,
                };
                rank_for_mention(mention, &ex.features, Some(ex.gold), &nodes, &self.linker, tax, k)
            })
            .collect()
    }

    pub fn snapshot(&self) -> HeadState {
        HeadState {
            linker: self.linker.clone(),
            nodes: snapshot(self.nodes.as_ref()),
        }
    }

    pub fn restore(&mut self, state: HeadState) -> Result<()> {
        self.linker = state.linker;
        restore(self.nodes.as_mut(), &state.nodes)
    }
}

/// Joint training; both losses reach the shared encoder.
pub fn mtl_train(
    model: &mut NerModel,
    head: &mut ElHead,
    train: &[TaggedSentence],
    validation: Option<&[TaggedSentence]>,
    cfg: &NerConfig,
    seed: u64,
) -> Result<TaggerOutcome> {
    cfg.validate()?;
    if head.features == MentionFeatures::Shared && head.linker.d_mention() != model.state_dim() {
        return Err(Error::Config(format!(
            "linker expects {}-dim mentions, shared states are {}-dim",
            head.linker.d_mention(),
            model.state_dim()
        )));
    }
    train_tagger(model, Some(head), train, validation, &cfg.schedule(), seed)
}

/// Tagging scores on predicted spans and linking scores on gold spans.
pub fn mtl_evaluate(model: &NerModel, head: &mut ElHead, data: &[TaggedSentence]) -> Result<EvalReport> {
    let prf = evaluate_tagger(model, data)?;
    let ranks = head.ranks(model, data)?;
    let mrr = if ranks.is_empty() { 0.0 } else { metrics::mrr(&ranks)? };
    let values = BTreeMap::from([
        ("Pre".to_string(), prf.precision),
        ("Rec".to_string(), prf.recall),
        ("F1".to_string(), prf.f1),
        ("MRR".to_string(), mrr),
        ("Pre@30".to_string(), precision_at_k_ranks(&ranks, 30)),
    ]);
    let counts = BTreeMap::from([
        ("sentences".to_string(), data.len()),
        ("gold_spans".to_string(), prf.gold),
        ("predicted_spans".to_string(), prf.predicted),
        ("true_positives".to_string(), prf.true_positives),
        ("linked_mentions".to_string(), ranks.len()),
    ]);
    EvalReport::single(Task::Mtl, values, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{preprocess, Abstract, ConceptRef, Mention, Warnings};
    use crate::encoders::{pool_average, EmbeddingTable};
    use crate::ner::char_encoder::{CharConfig, CharEncoderRegistry};
    use crate::ner::train::{batch_grads, tagged_sentences, Phase};
    use crate::ner::TokenSource;
    use crate::node2vec::{NodeEmbeddings, NodeKind};
    use crate::node_source::StaticNodes;
    use taxolink_numerics::{finite_difference_gradient, relative_error, Adam, ParamGroup, Parameterized, Rng};

    #[test]
    fn pooled_features() {
        let h = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]]).unwrap();
        assert_eq!(shared_mention_features(&h, 1..2).unwrap().vector, vec![3.0, 4.0]);
        let same = Tensor::from_rows(&[[0.5, -1.0], [0.5, -1.0]]).unwrap();
        assert_eq!(shared_mention_features(&same, 0..2).unwrap().vector, vec![0.5, -1.0]);
        let direct = pool_average(&h.slice_rows(0, 3).unwrap()).unwrap();
        assert_eq!(shared_mention_features(&h, 0..3).unwrap().vector, direct);
        assert!(matches!(shared_mention_features(&h, 2..2), Err(Error::Span(_))));
    }

    fn corpus() -> (Taxonomy, Vec<TaggedSentence>) {
        let tax = Taxonomy::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let docs = [
            ("1", "Colon cancer and gout.", vec![(0, 12, 1), (17, 21, 2)]),
            ("2", "Gout in mice.", vec![(0, 4, 2)]),
            ("3", "Rare colon cancer.", vec![(5, 17, 1)]),
        ];
        let mut sentences = Vec::new();
        for (id, title, spans) in docs {
            let mentions = spans
                .into_iter()
                .map(|(s, e, y): (usize, usize, usize)| Mention {
                    start: s,
                    end: e,
                    surface: title.chars().skip(s).take(e - s).collect(),
                    concept: ConceptRef::Resolved(tax.id(y).to_string()),
                })
                .collect();
            let doc = Abstract {
                doc_id: id.into(),
                title: title.into(),
                body: String::new(),
                mentions,
            };
            sentences.extend(preprocess(&doc, &mut Warnings::default()).unwrap());
        }
        let words = ["colon", "cancer", "gout", "mice", "rare"];
        let mut rng = Rng::seeded(4);
        let rows = Tensor::matrix(5, 3, (0..15).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let table = EmbeddingTable::from_rows(words.iter().map(|w| w.to_string()).collect(), rows).unwrap();
        let data = tagged_sentences(&sentences, &TokenSource::Static(&table), Some(&tax), None).unwrap();
        (tax, data)
    }

    fn model(dropout: f64, seed: u64) -> NerModel {
        let mut rng = Rng::seeded(seed);
        let (_, data) = corpus();
        let vocab = crate::ner::CharVocab::build(data.iter().flat_map(|d| d.input.words.iter().map(String::as_str)));
        let cfg = CharConfig {
            kind: "cnn".into(),
            dim: 3,
            hidden: 2,
            filters: 2,
        };
        let enc = CharEncoderRegistry::builtin().build(vocab, &cfg, &mut rng).unwrap();
        NerModel::new(3, Some(enc), 3, dropout, &mut rng).unwrap()
    }

    fn head(el_weight: f64, loss_mix: LossMix, finetune: bool) -> ElHead {
        let mut rng = Rng::seeded(8);
        let nodes = Tensor::matrix(3, 4, (0..12).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let emb = NodeEmbeddings::new(NodeKind::Type1, nodes).unwrap();
        let cfg = MtlConfig {
            el_weight,
            loss_mix,
            ..MtlConfig::default()
        };
        let mut h = ElHead::new(6, Box::new(StaticNodes::new(emb, finetune)), &cfg).unwrap();
        h.linker.w = Tensor::matrix(6, 4, (0..24).map(|_| rng.normal(0.0, 0.5)).collect()).unwrap();
        h
    }

    #[test]
    fn zero_weight_is_step_identical_to_tagger_only() {
        let (_, data) = corpus();
        let batches: Vec<Vec<&TaggedSentence>> = vec![vec![&data[0], &data[1]], vec![&data[2]], vec![&data[1], &data[0]]];
        let mut solo = model(0.5, 1);
        let mut joint = solo.clone();
        let mut h = head(0.0, LossMix::Sum, true);
        let (mut adam_solo, mut adam_joint) = (Adam::new(0.01), Adam::new(0.01));
        let (mut rng_solo, mut rng_joint) = (Rng::seeded(3), Rng::seeded(3));
        for step in 0..6 {
            let batch = &batches[step % 3];
            let (_, g) = batch_grads(&solo, None, batch, Phase::at_step(None, step), &mut rng_solo).unwrap();
            adam_solo.step(&mut ParamGroup::new().with("ner", &mut solo), &g).unwrap();
            let phase = Phase::at_step(Some(&h), step);
            assert!(phase.el);
            let (_, g) = batch_grads(&joint, Some(&mut h), batch, phase, &mut rng_joint).unwrap();
            assert!(g.prefix_norm("linker") == 0.0);
            adam_joint.step(&mut ParamGroup::new().with("ner", &mut joint), &g).unwrap();
            for name in solo.param_names() {
                assert_eq!(solo.get_param(&name), joint.get_param(&name), "step {step} {name}");
            }
        }
    }

    #[test]
    fn both_losses_reach_every_part() {
        let (_, data) = corpus();
        let batch: Vec<&TaggedSentence> = data.iter().collect();
        let mut m = model(0.0, 2);
        let mut h = head(1.0, LossMix::Sum, true);
        let (_, g) = batch_grads(&m, Some(&mut h), &batch, Phase { ner: true, el: true }, &mut Rng::seeded(0)).unwrap();
        for prefix in ["ner.crf", "ner.proj", "ner.bilstm", "ner.char", "linker", "nodes"] {
            assert!(g.prefix_norm(prefix) > 0.0, "{prefix}");
        }
        let before_m = m.clone();
        let before_h = h.snapshot();
        let mut group = ParamGroup::new().with("ner", &mut m).with("linker", &mut h.linker);
        group.push("nodes", h.nodes.params_mut().unwrap());
        Adam::new(1e-3).step(&mut group, &g).unwrap();
        assert_ne!(before_m.crf.transitions, m.crf.transitions);
        assert_ne!(before_m.bilstm.forward.w_x, m.bilstm.forward.w_x);
        assert_ne!(before_h.linker, h.linker);
    }

    #[test]
    fn joint_gradient_is_sum_and_matches_finite_differences() {
        let (_, data) = corpus();
        let batch: Vec<&TaggedSentence> = data.iter().collect();
        for seed in 0..3 {
            let m = model(0.0, seed);
            let mut h = head(0.7, LossMix::Sum, false);
            let grads_of = |phase: Phase, h: &mut ElHead| {
                batch_grads(&m, Some(h), &batch, phase, &mut Rng::seeded(0)).unwrap().1
            };
            let joint = grads_of(Phase { ner: true, el: true }, &mut h);
            let ner = grads_of(Phase { ner: true, el: false }, &mut h);
            let el = grads_of(Phase { ner: false, el: true }, &mut h);
            for name in ["ner.bilstm.fwd.w_x", "ner.bilstm.bwd.b", "ner.char.emb"] {
                let mut sum = ner.get(name).unwrap().clone();
                sum.add_assign(el.get(name).unwrap()).unwrap();
                assert!(sum.max_abs_diff(joint.get(name).unwrap()).unwrap() < 1e-12, "{name}");
            }
            for name in ["bilstm.fwd.w_x", "bilstm.bwd.w_h", "char.conv.weight", "proj.w"] {
                let numeric = finite_difference_gradient(
                    |p| {
                        let mut mm = m.clone();
                        mm.set_param(name, p).unwrap();
                        batch_grads(&mm, Some(&mut h), &batch, Phase { ner: true, el: true }, &mut Rng::seeded(0))
                            .unwrap()
                            .0
                    },
                    &m.get_param(name).unwrap(),
                    1e-5,
                )
                .unwrap();
                let err = relative_error(joint.get(&format!("ner.{name}")).unwrap(), &numeric);
                assert!(err < 1e-4, "seed {seed} {name}: {err}");
            }
            let w0 = h.linker.w.clone();
            let numeric = finite_difference_gradient(
                |p| {
                    h.linker.w = p.clone();
                    batch_grads(&m, Some(&mut h), &batch, Phase { ner: true, el: true }, &mut Rng::seeded(0))
                        .unwrap()
                        .0
                },
                &w0,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(joint.get("linker.w").unwrap(), &numeric) < 1e-4);
        }
    }

    #[test]
    fn alternate_mix_switches_tasks() {
        let h = head(1.0, LossMix::Alternate, false);
        assert_eq!(Phase::at_step(Some(&h), 0), Phase { ner: true, el: false });
        assert_eq!(Phase::at_step(Some(&h), 1), Phase { ner: false, el: true });
    }

    #[test]
    fn empty_evaluation_has_zero_counts() {
        let m = model(0.0, 0);
        let mut h = head(1.0, LossMix::Sum, false);
        let r = mtl_evaluate(&m, &mut h, &[]).unwrap();
        let keys: Vec<&str> = r.metrics.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["F1", "MRR", "Pre", "Pre@30", "Rec"]);
        assert!(r.metrics.values().all(|v| v.mean == 0.0));
        assert!(r.counts.values().all(|&c| c == 0));
    }

    #[test]
    fn joint_training_fits_toy_corpus() {
        let (_, data) = corpus();
        let mut m = model(0.0, 3);
        let mut h = head(1.0, LossMix::Sum, true);
        let cfg = NerConfig {
            hidden: 3,
            dropout: 0.0,
            epochs: 150,
            lr: 0.02,
            batch_size: 2,
            ..NerConfig::default()
        };
        mtl_train(&mut m, &mut h, &data, None, &cfg, 1).unwrap();
        let r = mtl_evaluate(&m, &mut h, &data).unwrap();
        assert_eq!(r.mean("F1"), Some(1.0), "{}", r.to_table());
        assert_eq!(r.mean("MRR"), Some(1.0), "{}", r.to_table());
    }
}
