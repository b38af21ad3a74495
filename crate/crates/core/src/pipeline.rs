//! The subcommands of the command-line tool as library calls.
//!
//! Each command reads its inputs from a [`RunConfig`], writes its artifacts
//! into `paths.out` and finishes with a `<command>.manifest.toml` holding the
//! config snapshot, the seed and the metric results. Nothing in an output
//! file depends on wall-clock time or thread scheduling, so two runs of one
//! manifest produce byte-identical files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use taxolink_numerics::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::{Manifest, RunConfig};
use crate::corpus::{ConceptRef, Corpus, Mention, OmimMap, Sentence, Split};
use crate::encoders::{encode_mention, pool_average, static_token_matrix, ContextualStore, EmbeddingTable};
use crate::error::{Error, Result};
use crate::linker::{rank_for_mention, train_linker, write_predictions, LinkExample, LinkPrediction, LinkerParams, MentionRef};
use crate::metrics::{self, confusion_report, precision_at_k, EvalReport, Task};
use crate::mtl::{mention_features, mtl_evaluate, mtl_train, ElHead, MentionFeatures};
use crate::ner::{
    evaluate_tagger, tagged_mentions, tagged_sentences, train_ner, CharEncoderRegistry, CharVocab, InputMode, NerModel,
    TaggedSentence, TaggerOutcome, TokenSource,
};
use crate::node2vec::{NodeEmbeddings, NodeKind};
use crate::node_source::{NodeEncoder, NodeSourceContext, NodeSourceRegistry, StaticNodes};
use crate::taxonomy::Taxonomy;

/// Runtime-selectable strategies.
#[derive(Clone, Default)]
pub struct Registries {
    pub nodes: NodeSourceRegistry,
    pub chars: CharEncoderRegistry,
}

/// Every input a run may read, loaded once.
#[derive(Debug)]
pub struct Data {
    pub taxonomy: Option<Taxonomy>,
    pub table: Option<EmbeddingTable>,
    pub contextual: Option<ContextualStore>,
    pub corpora: Vec<Corpus>,
}

impl Data {
    /// Validates `cfg` and loads whatever it references.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let p = &cfg.paths;
        let taxonomy = p.taxonomy.as_ref().map(Taxonomy::load).transpose()?;
        let omim = p.omim.as_ref().map(OmimMap::load).transpose()?;
        let mut corpora = Vec::new();
        for (split, path) in [
            (Split::Train, &p.train),
            (Split::Validation, &p.validation),
            (Split::Test, &p.test),
        ] {
            if let Some(path) = path {
                let c = Corpus::load(path, split, omim.as_ref(), taxonomy.as_ref())?;
                if c.warnings.total() > 0 {
                    log::warn!("{split}: {:?}", c.warnings);
                }
                corpora.push(c);
            }
        }
        Ok(Self {
            taxonomy,
            table: p.embeddings.as_ref().map(EmbeddingTable::load).transpose()?,
            contextual: p.contextual.as_ref().map(ContextualStore::load).transpose()?,
            corpora,
        })
    }

    pub fn corpus(&self, split: Split) -> Option<&Corpus> {
        self.corpora.iter().find(|c| c.split == split)
    }

    pub fn require_corpus(&self, split: Split) -> Result<&Corpus> {
        self.corpus(split)
            .ok_or_else(|| Error::Config(format!("paths.{split} is not set")))
    }

    pub fn taxonomy(&self) -> Result<&Taxonomy> {
        self.taxonomy
            .as_ref()
            .ok_or_else(|| Error::Config("paths.taxonomy is not set".into()))
    }

    /// Test split when configured, else validation, else train.
    pub fn default_eval_split(&self) -> Result<Split> {
        [Split::Test, Split::Validation, Split::Train]
            .into_iter()
            .find(|&s| self.corpus(s).is_some())
            .ok_or_else(|| Error::Config("no corpus split is configured".into()))
    }

    pub fn token_source(&self, mode: InputMode) -> Result<TokenSource<'_>> {
        match mode {
            InputMode::Static => self
                .table
                .as_ref()
                .map(TokenSource::Static)
                .ok_or_else(|| Error::Config("static tagger input needs paths.embeddings".into())),
            InputMode::Contextual => self
                .contextual
                .as_ref()
                .map(TokenSource::Contextual)
                .ok_or_else(|| Error::Config("contextual tagger input needs paths.contextual".into())),
        }
    }

    /// Mention vectors for standalone linking: contextual pools when a
    /// contextual file is configured, static-table pools otherwise.
    pub fn mention_source(&self) -> Result<MentionSource<'_>> {
        if let Some(store) = &self.contextual {
            return Ok(MentionSource::Contextual(store));
        }
        self.table
            .as_ref()
            .map(MentionSource::Static)
            .ok_or_else(|| Error::Config("linking needs paths.contextual or paths.embeddings".into()))
    }

    fn sentences(&self, split: Split) -> Result<Vec<Sentence>> {
        Ok(self.require_corpus(split)?.sentences()?.0)
    }

    fn tagged(&self, split: Split, mode: InputMode) -> Result<Vec<TaggedSentence>> {
        let source = self.token_source(mode)?;
        tagged_sentences(&self.sentences(split)?, &source, self.taxonomy.as_ref(), self.contextual.as_ref())
    }

    fn doc_chars(&self, split: Split) -> Result<HashMap<String, Vec<char>>> {
        Ok(self
            .require_corpus(split)?
            .abstracts
            .iter()
            .map(|a| (a.doc_id.clone(), a.chars()))
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum MentionSource<'a> {
    Contextual(&'a ContextualStore),
    Static(&'a EmbeddingTable),
}

impl MentionSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            MentionSource::Contextual(s) => s.dim(),
            MentionSource::Static(t) => t.dim(),
        }
    }

    pub fn features(&self, sentence: &Sentence, tokens: Range<usize>) -> Result<Vec<f64>> {
        match self {
            MentionSource::Contextual(store) => Ok(encode_mention(store.for_sentence(sentence)?, tokens)?.vector),
            MentionSource::Static(table) => {
                let words = sentence.words.get(tokens.clone()).filter(|w| !w.is_empty()).ok_or_else(|| {
                    Error::Span(format!("tokens {tokens:?} outside a {}-token sentence", sentence.len()))
                })?;
                pool_average(&static_token_matrix(table, words))
            }
        }
    }
}

/// Linking examples for every mention resolved to a node of `tax`.
pub fn link_examples(
    sentences: &[Sentence],
    tax: &Taxonomy,
    source: MentionSource<'_>,
) -> Result<Vec<(MentionRef, LinkExample)>> {
    let mut out = Vec::new();
    for s in sentences {
        for m in &s.mentions {
            let Some(gold) = m.concept.id().and_then(|id| tax.index_of(id)) else {
                continue;
            };
            let features = source.features(s, m.tokens.clone())?;
            out.push((
                MentionRef {
                    doc_id: s.doc_id.clone(),
                    start: m.span.start,
                    end: m.span.end,
                },
                LinkExample { features, gold },
            ));
        }
    }
    Ok(out)
}

/// Ranked predictions and the linking report (MRR, Pre@1, Pre@30).
pub fn link_report(
    examples: &[(MentionRef, LinkExample)],
    nodes: &Tensor,
    params: &LinkerParams,
    tax: &Taxonomy,
    k: usize,
) -> Result<(EvalReport, Vec<LinkPrediction>)> {
    let predictions: Vec<LinkPrediction> = examples
        .par_iter()
        .map(|(m, ex)| rank_for_mention(m.clone(), &ex.features, Some(ex.gold), nodes, params, tax, k))
        .collect::<Result<_>>()?;
    let ranks: Vec<usize> = predictions.iter().filter_map(|p| p.rank_of_gold).collect();
    let mrr = if ranks.is_empty() { 0.0 } else { metrics::mrr(&ranks)? };
    let values = BTreeMap::from([
        ("MRR".to_string(), mrr),
        ("Pre@1".to_string(), precision_at_k(&predictions, 1)),
        ("Pre@30".to_string(), precision_at_k(&predictions, 30)),
    ]);
    let counts = BTreeMap::from([("mentions".to_string(), predictions.len())]);
    Ok((EvalReport::single(Task::El, values, counts)?, predictions))
}

fn ner_report(model: &NerModel, data: &[TaggedSentence]) -> Result<EvalReport> {
    let prf = evaluate_tagger(model, data)?;
    let values = BTreeMap::from([
        ("Pre".to_string(), prf.precision),
        ("Rec".to_string(), prf.recall),
        ("F1".to_string(), prf.f1),
    ]);
    let counts = BTreeMap::from([
        ("sentences".to_string(), data.len()),
        ("gold_spans".to_string(), prf.gold),
        ("predicted_spans".to_string(), prf.predicted),
        ("true_positives".to_string(), prf.true_positives),
    ]);
    EvalReport::single(Task::Ner, values, counts)
}

fn build_nodes(cfg: &RunConfig, data: &Data, reg: &Registries) -> Result<Box<dyn NodeEncoder>> {
    let ctx = NodeSourceContext {
        taxonomy: data.taxonomy()?,
        table: data.table.as_ref(),
        dim: cfg.run.node_dim,
        walk: &cfg.node2vec,
        gcn: &cfg.gcn,
        finetune: cfg.run.finetune_nodes,
        file: cfg.paths.node_embeddings.clone(),
        seed: cfg.run.seed,
    };
    reg.nodes.build(&cfg.run.node_source, &ctx)
}

fn frozen_nodes(ck: &Checkpoint, tax: &Taxonomy) -> Result<Box<dyn NodeEncoder>> {
    let ids = ck
        .node_ids
        .as_ref()
        .ok_or_else(|| Error::Config(format!("a `{}` checkpoint has no node ids", ck.task)))?;
    if ids.len() != tax.len() || ids.iter().enumerate().any(|(i, id)| id != tax.id(i)) {
        return Err(Error::Integrity("checkpoint node ids differ from the configured taxonomy".into()));
    }
    let kind = ck.node_kind.unwrap_or(NodeKind::File);
    let e = NodeEmbeddings::new(kind, ck.get("node_matrix")?)?;
    Ok(Box::new(StaticNodes::new(e, false)))
}

fn load_tagger(ck: &Checkpoint, data: &Data, reg: &Registries) -> Result<NerModel> {
    let cfg = &ck.config;
    let source = data.token_source(cfg.ner.input)?;
    let vocab = CharVocab::from_chars(ck.char_vocab.clone().unwrap_or_default());
    let mut model = cfg.ner.build_model_with_vocab(source.dim(), vocab, &reg.chars, cfg.run.seed)?;
    ck.load_params("ner", &mut model)?;
    Ok(model)
}

fn load_head(ck: &Checkpoint, tax: &Taxonomy) -> Result<ElHead> {
    let linker = LinkerParams { w: ck.get("linker.w")? };
    let mut head = ElHead::new(linker.d_mention(), frozen_nodes(ck, tax)?, &ck.config.mtl)?;
    if head.linker.w.shape() != linker.w.shape() {
        return Err(Error::Integrity("checkpoint linker does not match its node matrix".into()));
    }
    head.linker = linker;
    Ok(head)
}

fn node_ids(tax: &Taxonomy) -> Vec<String> {
    (0..tax.len()).map(|i| tax.id(i).to_string()).collect()
}

/// Collects output files and metrics, then writes the manifest.
struct Run<'a> {
    out: PathBuf,
    manifest: Manifest,
    cfg: &'a RunConfig,
}

impl<'a> Run<'a> {
    fn start(command: &str, cfg: &'a RunConfig, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: Manifest::new(command, cfg, out),
            cfg,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.files.push(name.to_string());
        self.out.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn report(&mut self, stem: &str, report: &EvalReport) -> Result<()> {
        report.write(&self.out, stem)?;
        self.manifest.files.push(format!("{stem}.txt"));
        self.manifest.files.push(format!("{stem}.kv"));
        for (col, m) in &report.metrics {
            self.manifest.metrics.insert(format!("{stem}.{col}"), m.mean);
        }
        for (name, n) in &report.counts {
            self.manifest.counts.insert(format!("{stem}.{name}"), *n);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<Manifest> {
        let name = self.manifest.file_name();
        self.manifest.files.sort();
        self.manifest.files.dedup();
        debug_assert_eq!(self.manifest.config, *self.cfg);
        self.manifest.write(self.out.join(name))?;
        Ok(self.manifest)
    }
}

fn tagger_history(outcome: &TaggerOutcome) -> String {
    let mut out = String::from("epoch\tloss\tf1\tmrr\tscore\ton_validation\n");
    for e in &outcome.history {
        let mrr = e.mrr.map_or("-".to_string(), |m| m.to_string());
        writeln!(out, "{}\t{}\t{}\t{mrr}\t{}\t{}", e.epoch, e.loss, e.f1, e.score, e.on_validation).expect("string write");
    }
    out
}

/// Loads every configured input and records its counts.
pub fn validate(cfg: &RunConfig) -> Result<Manifest> {
    let data = Data::load(cfg)?;
    let mut run = Run::start("validate", cfg, &cfg.paths.out)?;
    let counts = &mut run.manifest.counts;
    if let Some(tax) = &data.taxonomy {
        counts.insert("taxonomy.concepts".into(), tax.len());
        counts.insert("taxonomy.edges".into(), tax.edges().len());
    }
    if let Some(t) = &data.table {
        counts.insert("embeddings.tokens".into(), t.len());
        counts.insert("embeddings.dim".into(), t.dim());
    }
    if let Some(c) = &data.contextual {
        counts.insert("contextual.sentences".into(), c.len());
        counts.insert("contextual.dim".into(), c.dim());
    }
    for corpus in &data.corpora {
        let s = corpus.stats()?;
        let (_, w) = corpus.sentences()?;
        let split = corpus.split;
        for (name, n) in [
            ("abstracts", s.abstracts),
            ("mentions", s.total_mentions),
            ("unique_mentions", s.unique_mentions),
            ("unique_concepts", s.unique_concepts),
            ("sentences", s.sentences),
            ("tokens", s.tokens),
            ("warnings", corpus.warnings.total() + w.total()),
        ] {
            counts.insert(format!("{split}.{name}"), n);
        }
    }
    run.finish()
}

/// Builds the configured node source and writes its embeddings.
pub fn embed_graph(cfg: &RunConfig, reg: &Registries) -> Result<Manifest> {
    let data = Data::load(cfg)?;
    let tax = data.taxonomy()?;
    let mut nodes = build_nodes(cfg, &data, reg)?;
    let e = nodes.embeddings()?;
    let mut run = Run::start("embed-graph", cfg, &cfg.paths.out)?;
    let path = run.path("nodes.txt");
    e.write(&path, tax)?;
    run.manifest.counts.insert("nodes".into(), e.len());
    run.manifest.counts.insert("dim".into(), e.dim());
    run.finish()
}

pub fn train_ner_command(cfg: &RunConfig, reg: &Registries) -> Result<Manifest> {
    let data = Data::load(cfg)?;
    let train = data.tagged(Split::Train, cfg.ner.input)?;
    let validation = match data.corpus(Split::Validation) {
        Some(_) => Some(data.tagged(Split::Validation, cfg.ner.input)?),
        None => None,
    };
    let source = data.token_source(cfg.ner.input)?;
    let words = train.iter().flat_map(|s| s.sentence.words.iter().map(String::as_str));
    let mut model = cfg.ner.build_model(&source, words, &reg.chars, cfg.run.seed)?;
    let outcome = train_ner(&mut model, &train, validation.as_deref(), &cfg.ner, cfg.run.seed)?;

    let mut run = Run::start("train-ner", cfg, &cfg.paths.out)?;
    let mut ck = Checkpoint::new("ner", cfg);
    ck.char_vocab = model.char_encoder.as_ref().map(|c| c.vocab().chars().to_vec());
    ck.push_params("ner", &model);
    ck.write(run.path("model.json"))?;
    run.write("history.tsv", &tagger_history(&outcome))?;
    run.manifest.counts.insert("best_epoch".into(), outcome.best_epoch);
    run.report("train", &ner_report(&model, &train)?)?;
    if let Some(v) = &validation {
        run.report("validation", &ner_report(&model, v)?)?;
    }
    run.finish()
}

pub fn train_el_command(cfg: &RunConfig, reg: &Registries) -> Result<Manifest> {
    let data = Data::load(cfg)?;
    let tax = data.taxonomy()?;
    let source = data.mention_source()?;
    let train = link_examples(&data.sentences(Split::Train)?, tax, source)?;
    let validation = match data.corpus(Split::Validation) {
        Some(_) => Some(link_examples(&data.sentences(Split::Validation)?, tax, source)?),
        None => None,
    };
    let mut nodes = build_nodes(cfg, &data, reg)?;
    let init = LinkerParams::identity_padded(source.dim(), nodes.dim());
    let strip = |v: &[(MentionRef, LinkExample)]| v.iter().map(|e| e.1.clone()).collect::<Vec<_>>();
    let train_ex = strip(&train);
    let val_ex = validation.as_deref().map(strip);
    let outcome = train_linker(&train_ex, val_ex.as_deref(), init, nodes.as_mut(), &cfg.linker, cfg.run.seed)?;

    let mut run = Run::start("train-el", cfg, &cfg.paths.out)?;
    let mut ck = Checkpoint::new("el", cfg);
    ck.node_ids = Some(node_ids(tax));
    ck.node_kind = Some(nodes.kind());
    ck.push_params("linker", &outcome.params);
    ck.push("node_matrix", &outcome.nodes);
    for (name, t) in &outcome.node_params {
        ck.push(&format!("nodes.{name}"), t);
    }
    ck.write(run.path("model.json"))?;
    let mut history = String::from("epoch\tloss\ttrain_mrr\tvalidation_mrr\n");
    for e in &outcome.history {
        let va = e.validation_mrr.map_or("-".to_string(), |m| m.to_string());
        writeln!(history, "{}\t{}\t{}\t{va}", e.epoch, e.loss, e.train_mrr).expect("string write");
    }
    run.write("history.tsv", &history)?;
    run.manifest.counts.insert("best_epoch".into(), outcome.best_epoch);
    for (stem, examples) in [("train", Some(&train)), ("validation", validation.as_ref())] {
        let Some(examples) = examples else { continue };
        let (report, preds) = link_report(examples, &outcome.nodes, &outcome.params, tax, cfg.linker.k)?;
        run.report(stem, &report)?;
        run.write(&format!("{stem}.confusion.txt"), &confusion_report(&preds, tax).to_text())?;
    }
    run.finish()
}

pub fn train_mtl_command(cfg: &RunConfig, reg: &Registries) -> Result<Manifest> {
    let data = Data::load(cfg)?;
    let tax = data.taxonomy()?;
    let train = data.tagged(Split::Train, cfg.ner.input)?;
    let validation = match data.corpus(Split::Validation) {
        Some(_) => Some(data.tagged(Split::Validation, cfg.ner.input)?),
        None => None,
    };
    let source = data.token_source(cfg.ner.input)?;
    let words = train.iter().flat_map(|s| s.sentence.words.iter().map(String::as_str));
    let mut model = cfg.ner.build_model(&source, words, &reg.chars, cfg.run.seed)?;
    let mention_dim = match cfg.mtl.features {
        MentionFeatures::Shared => model.state_dim(),
        MentionFeatures::Contextual => data
            .contextual
            .as_ref()
            .ok_or_else(|| Error::Config("mtl.features = contextual needs paths.contextual".into()))?
            .dim(),
    };
    let mut head = ElHead::new(mention_dim, build_nodes(cfg, &data, reg)?, &cfg.mtl)?;
    let outcome = mtl_train(&mut model, &mut head, &train, validation.as_deref(), &cfg.ner, cfg.run.seed)?;

    let mut run = Run::start("train-mtl", cfg, &cfg.paths.out)?;
    let mut ck = Checkpoint::new("mtl", cfg);
    ck.char_vocab = model.char_encoder.as_ref().map(|c| c.vocab().chars().to_vec());
    ck.node_ids = Some(node_ids(tax));
    ck.node_kind = Some(head.nodes.kind());
    ck.push_params("ner", &model);
    ck.push_params("linker", &head.linker);
    ck.push("node_matrix", &head.nodes.encode()?);
    for (name, t) in head.snapshot().nodes {
        ck.push(&format!("nodes.{name}"), &t);
    }
    ck.write(run.path("model.json"))?;
    run.write("history.tsv", &tagger_history(&outcome))?;
    run.manifest.counts.insert("best_epoch".into(), outcome.best_epoch);
    for (stem, set) in [("train", Some(&train)), ("validation", validation.as_ref())] {
        let Some(set) = set else { continue };
        run.report(stem, &mtl_evaluate(&model, &mut head, set)?)?;
        let preds = head.predictions(&model, set, tax, cfg.mtl.k)?;
        run.write(&format!("{stem}.confusion.txt"), &confusion_report(&preds, tax).to_text())?;
    }
    run.finish()
}

/// Where evaluation and prediction read from and write to.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub model: PathBuf,
    /// Defaults to test, then validation, then train.
    pub split: Option<Split>,
    /// Defaults to the checkpoint's directory.
    pub out: Option<PathBuf>,
    /// `key=value` overrides applied to the checkpoint's config.
    pub overrides: Vec<String>,
}

impl ModelRun {
    fn open(&self) -> Result<(Checkpoint, Data, Split, PathBuf)> {
        let mut ck = Checkpoint::load(&self.model)?;
        if !self.overrides.is_empty() {
            let mut table: toml::Table =
                toml::from_str(&ck.config.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
            for o in &self.overrides {
                crate::config::apply_override(&mut table, o)?;
            }
            ck.config = toml::Value::Table(table)
                .try_into()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let data = Data::load(&ck.config)?;
        let split = match self.split {
            Some(s) => s,
            None => data.default_eval_split()?,
        };
        let out = match &self.out {
            Some(o) => o.clone(),
            None => self.model.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        };
        Ok((ck, data, split, out))
    }
}

/// Scores a checkpoint on one split.
pub fn evaluate(job: &ModelRun, reg: &Registries) -> Result<Manifest> {
    let (ck, data, split, out) = job.open()?;
    let cfg = &ck.config;
    let mut run = Run::start("evaluate", cfg, &out)?;
    let stem = format!("eval.{split}");
    match ck.task.as_str() {
        "ner" => {
            let model = load_tagger(&ck, &data, reg)?;
            let set = data.tagged(split, cfg.ner.input)?;
            run.report(&stem, &ner_report(&model, &set)?)?;
        }
        "el" => {
            let tax = data.taxonomy()?;
            let examples = link_examples(&data.sentences(split)?, tax, data.mention_source()?)?;
            let mut nodes = frozen_nodes(&ck, tax)?;
            let params = LinkerParams { w: ck.get("linker.w")? };
            let (report, preds) = link_report(&examples, &nodes.encode()?, &params, tax, cfg.linker.k)?;
            run.report(&stem, &report)?;
            run.write(&format!("{stem}.confusion.txt"), &confusion_report(&preds, tax).to_text())?;
        }
        "mtl" => {
            let tax = data.taxonomy()?;
            let model = load_tagger(&ck, &data, reg)?;
            let mut head = load_head(&ck, tax)?;
            let set = data.tagged(split, cfg.ner.input)?;
            run.report(&stem, &mtl_evaluate(&model, &mut head, &set)?)?;
            let preds = head.predictions(&model, &set, tax, cfg.mtl.k)?;
            run.write(&format!("{stem}.confusion.txt"), &confusion_report(&preds, tax).to_text())?;
        }
        other => return Err(Error::Config(format!("unknown checkpoint task `{other}`"))),
    }
    run.finish()
}

fn mention_rows(mentions: &[(String, Mention)]) -> String {
    let mut out = String::new();
    for (doc, m) in mentions {
        writeln!(out, "{doc}\t{}\t{}\t{}\tDisease\t{}", m.start, m.end, m.surface, m.concept).expect("string write");
    }
    out
}

/// Writes predicted mentions (`mentions.tsv`, annotation-row format) and,
/// for linking checkpoints, ranked concepts (`links.tsv`).
pub fn predict(job: &ModelRun, reg: &Registries) -> Result<Manifest> {
    let (ck, data, split, out) = job.open()?;
    let cfg = &ck.config;
    let mut run = Run::start("predict", cfg, &out)?;
    let mentions_file = format!("predict.{split}.mentions.tsv");
    let links_file = format!("predict.{split}.links.tsv");
    match ck.task.as_str() {
        "ner" => {
            let model = load_tagger(&ck, &data, reg)?;
            let chars = data.doc_chars(split)?;
            let set = data.tagged(split, cfg.ner.input)?;
            let found: Vec<Vec<(String, Mention)>> = set
                .par_iter()
                .map(|s| {
                    let tags = model.decode(&s.input)?;
                    let doc = &s.sentence.doc_id;
                    Ok(tagged_mentions(&s.sentence, &tags, &chars[doc])
                        .into_iter()
                        .map(|m| (doc.clone(), m))
                        .collect())
                })
                .collect::<Result<_>>()?;
            let found: Vec<(String, Mention)> = found.into_iter().flatten().collect();
            run.manifest.counts.insert("mentions".into(), found.len());
            run.write(&mentions_file, &mention_rows(&found))?;
        }
        "el" => {
            let tax = data.taxonomy()?;
            let examples = link_examples(&data.sentences(split)?, tax, data.mention_source()?)?;
            let mut nodes = frozen_nodes(&ck, tax)?;
            let params = LinkerParams { w: ck.get("linker.w")? };
            let (_, preds) = link_report(&examples, &nodes.encode()?, &params, tax, cfg.linker.k)?;
            run.manifest.counts.insert("mentions".into(), preds.len());
            write_predictions(run.path(&links_file), &preds)?;
        }
        "mtl" => {
            let tax = data.taxonomy()?;
            let model = load_tagger(&ck, &data, reg)?;
            let mut head = load_head(&ck, tax)?;
            let nodes = head.nodes.encode()?;
            let chars = data.doc_chars(split)?;
            let set = data.tagged(split, cfg.ner.input)?;
            let features = head.features;
            let linker = &head.linker;
            let per: Vec<Vec<(String, Mention, LinkPrediction)>> = set
                .par_iter()
                .map(|s| {
                    let tags = model.decode(&s.input)?;
                    let states = model.states(&s.input)?;
                    let doc = &s.sentence.doc_id;
                    let mut rows = Vec::new();
                    for (range, mut m) in tags.spans().into_iter().zip(tagged_mentions(&s.sentence, &tags, &chars[doc])) {
                        let f = mention_features(features, s, &states, range.clone())?;
                        let gold = s.links.iter().find(|(r, _)| *r == range).map(|l| l.1);
                        let mref = MentionRef {
                            doc_id: doc.clone(),
                            start: m.start,
                            end: m.end,
                        };
                        let p = rank_for_mention(mref, &f, gold, &nodes, linker, tax, cfg.mtl.k)?;
                        if let Some((id, _)) = p.ranked.first() {
                            m.concept = ConceptRef::Resolved(id.clone());
                        }
                        rows.push((doc.clone(), m, p));
                    }
                    Ok(rows)
                })
                .collect::<Result<_>>()?;
            let rows: Vec<_> = per.into_iter().flatten().collect();
            let mentions: Vec<(String, Mention)> = rows.iter().map(|r| (r.0.clone(), r.1.clone())).collect();
            let preds: Vec<LinkPrediction> = rows.into_iter().map(|r| r.2).collect();
            run.manifest.counts.insert("mentions".into(), mentions.len());
            run.write(&mentions_file, &mention_rows(&mentions))?;
            write_predictions(run.path(&links_file), &preds)?;
        }
        other => return Err(Error::Config(format!("unknown checkpoint task `{other}`"))),
    }
    run.finish()
}
