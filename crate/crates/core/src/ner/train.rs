//! Mini-batch training of the tagger, alone or with a linking head sharing
//! its biLSTM states.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use taxolink_numerics::{Adam, Grads, ParamGroup, Rng, Tensor};

use super::char_encoder::{CharConfig, CharEncoderRegistry, CharVocab};
use super::model::{InputMode, NerModel, TaggerInput, TokenSource};
use crate::corpus::Sentence;
use crate::encoders::ContextualStore;
use crate::error::{Error, Result};
use crate::metrics::{span_micro_prf, DocSpans, Prf};
use crate::mtl::{ElHead, LossMix};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerConfig {
    /// Per-direction biLSTM size.
    pub hidden: usize,
    /// Applied to biLSTM inputs and outputs.
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Sentences per step.
    pub batch_size: usize,
    /// Epochs without improvement before stopping; 0 never stops early.
    pub patience: usize,
    pub input: InputMode,
    /// Concatenate a character encoding to static inputs.
    pub use_chars: bool,
    pub chars: CharConfig,
}

impl Default for NerConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            dropout: 0.5,
            epochs: 50,
            lr: 1e-3,
            batch_size: 16,
            patience: 0,
            input: InputMode::Static,
            use_chars: true,
            chars: CharConfig::default(),
        }
    }
}

impl NerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("ner hidden and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("ner dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("ner lr must be > 0, got {}", self.lr)));
        }
        if self.use_chars && self.input == InputMode::Static && self.chars.dim == 0 {
            return Err(Error::Config("character embedding dim must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            patience: self.patience,
        }
    }

    /// Fresh tagger for `source`; the character vocabulary comes from `words`.
    pub fn build_model<'a>(
        &self,
        source: &TokenSource,
        words: impl IntoIterator<Item = &'a str>,
        registry: &CharEncoderRegistry,
        seed: u64,
    ) -> Result<NerModel> {
        self.build_model_with_vocab(source.dim(), CharVocab::build(words), registry, seed)
    }

    /// Fresh tagger over `fixed_dim` inputs with a given character vocabulary.
    pub fn build_model_with_vocab(
        &self,
        fixed_dim: usize,
        vocab: CharVocab,
        registry: &CharEncoderRegistry,
        seed: u64,
    ) -> Result<NerModel> {
        self.validate()?;
        let mut rng = Rng::seeded(seed).derive(0x6e72);
        let chars = if self.uses_chars() {
            Some(registry.build(vocab, &self.chars, &mut rng)?)
        } else {
            None
        };
        NerModel::new(fixed_dim, chars, self.hidden, self.dropout, &mut rng)
    }

    pub fn uses_chars(&self) -> bool {
        self.use_chars && self.input == InputMode::Static
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
}

/// A sentence ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSentence {
    pub sentence: Sentence,
    pub input: TaggerInput,
    pub gold: Vec<usize>,
    /// Mentions resolved to a taxonomy node.
    pub links: Vec<(Range<usize>, usize)>,
    /// Contextual vectors, when a store was supplied.
    pub context: Option<Tensor>,
}

/// Builds training views of non-empty sentences. Mentions whose concept is
/// unresolved or missing from `tax` carry no link.
pub fn tagged_sentences(
    sentences: &[Sentence],
    source: &TokenSource,
    tax: Option<&Taxonomy>,
    context: Option<&ContextualStore>,
) -> Result<Vec<TaggedSentence>> {
    sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let links = match tax {
                Some(tax) => s
                    .mentions
                    .iter()
                    .filter_map(|m| m.concept.id().and_then(|id| tax.index_of(id)).map(|y| (m.tokens.clone(), y)))
                    .collect(),
                None => Vec::new(),
            };
            Ok(TaggedSentence {
                sentence: s.clone(),
                input: source.input(s)?,
                gold: s.tags.indices(),
                links,
                context: match context {
                    Some(store) => Some(store.for_sentence(s)?.vectors.clone()),
                    None => None,
                },
            })
        })
        .collect()
}

pub fn gold_spans(data: &[TaggedSentence]) -> DocSpans {
    let mut out = DocSpans::new();
    for d in data {
        let spans = out.entry(d.sentence.doc_id.clone()).or_default();
        for m in &d.sentence.mentions {
            spans.insert((m.span.start, m.span.end));
        }
    }
    out
}

/// Decoded spans of every sentence, computed in parallel.
pub fn predicted_spans(model: &NerModel, data: &[TaggedSentence]) -> Result<DocSpans> {
    let per: Vec<(String, Vec<(usize, usize)>)> = data
        .par_iter()
        .map(|d| {
            let tags = model.decode(&d.input)?;
            let spans = tags
                .spans()
                .iter()
                .map(|r| {
                    let s = d.sentence.char_span(r);
                    (s.start, s.end)
                })
                .collect();
            Ok((d.sentence.doc_id.clone(), spans))
        })
        .collect::<Result<_>>()?;
    let mut out = DocSpans::new();
    for (doc, spans) in per {
        out.entry(doc).or_default().extend(spans);
    }
    Ok(out)
}

pub fn evaluate_tagger(model: &NerModel, data: &[TaggedSentence]) -> Result<Prf> {
    Ok(span_micro_prf(&gold_spans(data), &predicted_spans(model, data)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerEpoch {
    pub epoch: usize,
    /// Mean batch objective over the epoch.
    pub loss: f64,
    /// F1 on the selection set (validation when given, else training).
    pub f1: f64,
    pub mrr: Option<f64>,
    pub score: f64,
    pub on_validation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerOutcome {
    pub initial_score: f64,
    pub history: Vec<TaggerEpoch>,
    pub best_epoch: usize,
}

fn prefixed(grads: &Grads, prefix: &str, into: &mut Grads) {
    for (name, g) in grads.iter() {
        into.accumulate(&format!("{prefix}.{name}"), g, 1.0);
    }
}

/// Which losses a step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Phase {
    pub ner: bool,
    pub el: bool,
}

impl Phase {
    pub(crate) fn at_step(head: Option<&ElHead>, step: usize) -> Self {
        match head.map(|h| h.loss_mix) {
            None => Phase { ner: true, el: false },
            Some(LossMix::Sum) => Phase { ner: true, el: true },
            Some(LossMix::Alternate) => Phase {
                ner: step % 2 == 0,
                el: step % 2 == 1,
            },
        }
    }
}

/// Batch objective and gradients, named `ner.*` for the tagger and
/// `linker.*` / `nodes.*` for the head. The tagger loss is the batch mean
/// sentence NLL; the head adds `el_weight` times its mean mention NLL.
pub(crate) fn batch_grads(
    model: &NerModel,
    head: Option<&mut ElHead>,
    batch: &[&TaggedSentence],
    phase: Phase,
    rng: &mut Rng,
) -> Result<(f64, Grads)> {
    let scale = 1.0 / batch.len() as f64;
    let passes = batch
        .iter()
        .map(|s| model.forward(&s.input, rng, true))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Grads::new();
    let mut loss = 0.0;
    let mut d_states: Vec<Option<Tensor>> = vec![None; batch.len()];
    if let (Some(head), true) = (head, phase.el) {
        let states: Vec<&Tensor> = passes.iter().map(|p| &p.states).collect();
        if let Some(el) = head.loss_grads(batch, &states)? {
            loss += el.loss;
            for (name, g) in el.grads.iter() {
                grads.accumulate(name, g, 1.0);
            }
            d_states = el.d_states;
        }
    }
    let tags = model.crf.tags();
    for ((s, pass), ds) in batch.iter().zip(&passes).zip(&d_states) {
        let de = if phase.ner {
            let (nll, de, g) = model.nll_grads(pass, &s.gold, scale)?;
            loss += nll * scale;
            prefixed(&g, "ner", &mut grads);
            de
        } else {
            Tensor::zeros(&[s.input.len(), tags])
        };
        let g = model.backward(pass, &de, ds.as_ref())?;
        prefixed(&g, "ner", &mut grads);
    }
    if !loss.is_finite() {
        return Err(Error::Divergence("training objective is not finite".into()));
    }
    Ok((loss, grads))
}

fn apply_step(adam: &mut Adam, model: &mut NerModel, head: Option<&mut ElHead>, grads: &Grads) -> Result<()> {
    let mut group = ParamGroup::new().with("ner", model);
    if let Some(h) = head {
        group.push("linker", &mut h.linker);
        if let Some(p) = h.nodes.params_mut() {
            group.push("nodes", p);
        }
    }
    adam.step(&mut group, grads).map_err(Error::from)
}

fn selection(model: &NerModel, head: Option<&mut ElHead>, data: &[TaggedSentence]) -> Result<(f64, Option<f64>, f64)> {
    let f1 = evaluate_tagger(model, data)?.f1;
    let mrr = match head {
        Some(h) => h.mrr(model, data)?,
        None => None,
    };
    let score = mrr.map_or(f1, |m| (f1 + m) / 2.0);
    Ok((f1, mrr, score))
}

/// Adam over shuffled sentence batches. Selects the epoch with the best
/// validation score (span F1, averaged with MRR when a head is attached),
/// falling back to the training set without validation data, and restores it.
pub fn train_tagger(
    model: &mut NerModel,
    mut head: Option<&mut ElHead>,
    train: &[TaggedSentence],
    validation: Option<&[TaggedSentence]>,
    schedule: &Schedule,
    seed: u64,
) -> Result<TaggerOutcome> {
    if train.is_empty() {
        return Err(Error::Training("no sentences to train the tagger on".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let (select_on, on_validation) = match validation {
        Some(v) if !v.is_empty() => (v, true),
        _ => (train, false),
    };
    let mut adam = Adam::new(schedule.lr);
    let mut order_rng = Rng::seeded(seed).derive(0x6e65);
    let mut dropout_rng = Rng::seeded(seed).derive(0x6470);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let (_, _, initial_score) = selection(model, head.as_deref_mut(), select_on)?;
    let snapshot_head = |h: &Option<&mut ElHead>| h.as_ref().map(|h| h.snapshot());
    let mut best = (model.clone(), snapshot_head(&head), 0usize);
    let mut best_score = initial_score;
    let mut since_best = 0;
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut step = 0usize;

    for epoch in 1..=schedule.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<&TaggedSentence> = chunk.iter().map(|&i| &train[i]).collect();
            let phase = Phase::at_step(head.as_deref(), step);
            step += 1;
            let (loss, grads) = batch_grads(model, head.as_deref_mut(), &batch, phase, &mut dropout_rng)?;
            total += loss;
            batches += 1;
            apply_step(&mut adam, model, head.as_deref_mut(), &grads)?;
        }
        let (f1, mrr, score) = selection(model, head.as_deref_mut(), select_on)?;
        let loss = total / batches as f64;
        log::debug!("tagger epoch {epoch}: loss {loss:.6} F1 {f1:.4} MRR {mrr:?}");
        history.push(TaggerEpoch {
            epoch,
            loss,
            f1,
            mrr,
            score,
            on_validation,
        });
        if score > best_score {
            best_score = score;
            best = (model.clone(), snapshot_head(&head), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if schedule.patience > 0 && since_best >= schedule.patience {
                log::info!("tagger early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (best_model, head_state, best_epoch) = best;
    *model = best_model;
    if let (Some(h), Some(state)) = (head.as_deref_mut(), head_state) {
        h.restore(state)?;
    }
    Ok(TaggerOutcome {
        initial_score,
        history,
        best_epoch,
    })
}

/// Tagger-only training.
pub fn train_ner(
    model: &mut NerModel,
    train: &[TaggedSentence],
    validation: Option<&[TaggedSentence]>,
    cfg: &NerConfig,
    seed: u64,
) -> Result<TaggerOutcome> {
    cfg.validate()?;
    train_tagger(model, None, train, validation, &cfg.schedule(), seed)
}
