//! The tagger: token inputs, biLSTM re-encoder, emission projection, CRF.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use taxolink_numerics::tensor::{gemv_acc, outer_acc};
use taxolink_numerics::{apply_dropout, DropoutMask, Grads, Parameterized, Rng, Tensor};

use super::char_encoder::{CharCache, CharEncoder};
use super::crf::{crf_nll_grads, viterbi_decode, CrfParams};
use super::lstm::{bilstm_backward, bilstm_forward, BiLstmCache, BiLstmParams};
use crate::corpus::{preprocess, Abstract, ConceptRef, Mention, Sentence, Tag, TagSequence, Warnings};
use crate::encoders::{static_token_matrix, ContextualStore, EmbeddingTable};
use crate::error::{Error, Result};

/// Where the fixed part of each token vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Static table row, concatenated with the character encoding when enabled.
    #[default]
    Static,
    /// Pre-computed contextual vectors alone.
    Contextual,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Static => "static",
            InputMode::Contextual => "contextual",
        })
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(InputMode::Static),
            "contextual" => Ok(InputMode::Contextual),
            other => Err(Error::Config(format!("unknown input mode `{other}` (static, contextual)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TokenSource<'a> {
    Static(&'a EmbeddingTable),
    Contextual(&'a ContextualStore),
}

impl TokenSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            TokenSource::Static(t) => t.dim(),
            TokenSource::Contextual(s) => s.dim(),
        }
    }

    pub fn fixed_inputs(&self, sentence: &Sentence) -> Result<Tensor> {
        match self {
            TokenSource::Static(t) => Ok(static_token_matrix(t, &sentence.words)),
            TokenSource::Contextual(s) => Ok(s.for_sentence(sentence)?.vectors.clone()),
        }
    }

    pub fn input(&self, sentence: &Sentence) -> Result<TaggerInput> {
        Ok(TaggerInput {
            words: sentence.words.clone(),
            fixed: self.fixed_inputs(sentence)?,
        })
    }
}

/// Words of a sentence with their fixed token vectors (`t × d_fixed`).
#[derive(Debug, Clone, PartialEq)]
pub struct TaggerInput {
    pub words: Vec<String>,
    pub fixed: Tensor,
}

impl TaggerInput {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug)]
pub struct TaggerPass {
    x_mask: DropoutMask,
    chars: Vec<CharCache>,
    lstm: BiLstmCache,
    h_mask: DropoutMask,
    /// biLSTM states after output dropout, `t × 2h`.
    pub states: Tensor,
    /// `t × T`.
    pub emissions: Tensor,
}

#[derive(Debug, Clone)]
pub struct NerModel {
    pub char_encoder: Option<Box<dyn CharEncoder>>,
    pub fixed_dim: usize,
    pub bilstm: BiLstmParams,
    /// `2h × T`.
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub crf: CrfParams,
    pub dropout: f64,
}

impl NerModel {
    pub fn new(
        fixed_dim: usize,
        char_encoder: Option<Box<dyn CharEncoder>>,
        hidden: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("ner hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let d_in = fixed_dim + char_encoder.as_ref().map_or(0, |c| c.output_dim());
        if d_in == 0 {
            return Err(Error::Config("tagger input dimension is zero".into()));
        }
        let bilstm = BiLstmParams::new(d_in, hidden, rng);
        let tags = Tag::COUNT;
        let bound = (6.0 / (2 * hidden + tags) as f64).sqrt();
        let proj_w = Tensor::matrix(
            2 * hidden,
            tags,
            (0..2 * hidden * tags).map(|_| rng.uniform_range(-bound, bound)).collect(),
        )?;
        Ok(Self {
            char_encoder,
            fixed_dim,
            bilstm,
            proj_w,
            proj_b: Tensor::zeros(&[tags]),
            crf: CrfParams::zeros(tags),
            dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.bilstm.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.bilstm.hidden()
    }

    /// Width of the shared token states.
    pub fn state_dim(&self) -> usize {
        self.bilstm.output_dim()
    }

    pub fn forward(&self, input: &TaggerInput, rng: &mut Rng, training: bool) -> Result<TaggerPass> {
        let t = input.len();
        if t == 0 {
            return Err(Error::Span("cannot tag an empty sentence".into()));
        }
        if input.fixed.rows() != t || input.fixed.cols() != self.fixed_dim {
            return Err(Error::Config(format!(
                "tagger expects {t}×{} fixed inputs, got {:?}",
                self.fixed_dim,
                input.fixed.shape()
            )));
        }
        let d_in = self.input_dim();
        let mut x = Tensor::zeros(&[t, d_in]);
        let mut chars = Vec::with_capacity(t);
        for i in 0..t {
            let row = x.row_mut(i);
            row[..self.fixed_dim].copy_from_slice(input.fixed.row(i));
            if let Some(enc) = &self.char_encoder {
                let (v, cache) = enc.encode(&input.words[i]);
                row[self.fixed_dim..].copy_from_slice(&v);
                chars.push(cache);
            }
        }
        let (x, x_mask) = apply_dropout(&x, self.dropout, rng, training)?;
        let (h, lstm) = bilstm_forward(&self.bilstm, &x);
        let (states, h_mask) = apply_dropout(&h, self.dropout, rng, training)?;
        let tags = self.crf.tags();
        let mut emissions = Tensor::zeros(&[t, tags]);
        for i in 0..t {
            let e = emissions.row_mut(i);
            e.copy_from_slice(self.proj_b.data());
            for (k, &s) in states.row(i).iter().enumerate() {
                for (ej, wj) in e.iter_mut().zip(self.proj_w.row(k)) {
                    *ej += s * wj;
                }
            }
        }
        if !emissions.is_finite() {
            return Err(Error::Divergence("tagger emissions are not finite".into()));
        }
        Ok(TaggerPass {
            x_mask,
            chars,
            lstm,
            h_mask,
            states,
            emissions,
        })
    }

    /// Gradients of everything below the CRF given `∂loss/∂emissions` and an
    /// optional extra `∂loss/∂states` (post-dropout), e.g. from a linking head.
    pub fn backward(&self, pass: &TaggerPass, d_emissions: &Tensor, d_states: Option<&Tensor>) -> Result<Grads> {
        let (t, tags) = (pass.emissions.rows(), self.crf.tags());
        if d_emissions.shape() != [t, tags] {
            return Err(Error::Config(format!("emission gradient shape {:?}", d_emissions.shape())));
        }
        let two_h = self.state_dim();
        let mut dw = Tensor::zeros(&[two_h, tags]);
        let mut db = Tensor::zeros(&[tags]);
        let mut dh = Tensor::zeros(&[t, two_h]);
        for i in 0..t {
            let de = d_emissions.row(i);
            outer_acc(dw.data_mut(), pass.states.row(i), de);
            for (a, b) in db.data_mut().iter_mut().zip(de) {
                *a += b;
            }
            gemv_acc(self.proj_w.data(), two_h, tags, de, dh.row_mut(i));
        }
        if let Some(extra) = d_states {
            dh.add_assign(extra)?;
        }
        pass.h_mask.backward(dh.data_mut());
        let (g_lstm, mut dx) = bilstm_backward(&self.bilstm, &pass.lstm, &dh);
        pass.x_mask.backward(dx.data_mut());
        let mut grads = Grads::collect(Some("bilstm"), &g_lstm);
        grads.accumulate("proj.w", &dw, 1.0);
        grads.accumulate("proj.b", &db, 1.0);
        if let Some(enc) = &self.char_encoder {
            let mut cg = Grads::new();
            for (i, cache) in pass.chars.iter().enumerate() {
                enc.backward(cache, &dx.row(i)[self.fixed_dim..], &mut cg)?;
            }
            for (name, g) in cg.iter() {
                grads.accumulate(&format!("char.{name}"), g, 1.0);
            }
        }
        Ok(grads)
    }

    /// Sentence NLL and the gradients of every parameter, scaled by `weight`.
    pub fn nll_grads(&self, pass: &TaggerPass, gold: &[usize], weight: f64) -> Result<(f64, Tensor, Grads)> {
        let (nll, mut de, dcrf) = crf_nll_grads(&pass.emissions, gold, &self.crf)?;
        if !nll.is_finite() {
            return Err(Error::Divergence("tagger loss is not finite".into()));
        }
        de.scale(weight);
        let mut g = Grads::new();
        g.accumulate("crf.transitions", &dcrf.transitions, weight);
        Ok((nll, de, g))
    }

    /// Shared states without dropout.
    pub fn states(&self, input: &TaggerInput) -> Result<Tensor> {
        let mut rng = Rng::seeded(0);
        Ok(self.forward(input, &mut rng, false)?.states)
    }

    /// Viterbi tags, repaired to well-formed IOB.
    pub fn decode(&self, input: &TaggerInput) -> Result<TagSequence> {
        let mut rng = Rng::seeded(0);
        let pass = self.forward(input, &mut rng, false)?;
        let path = viterbi_decode(&pass.emissions, &self.crf)?;
        Ok(TagSequence::from_indices(&path).repaired())
    }
}

impl Parameterized for NerModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(enc) = &self.char_encoder {
            enc.visit(&mut |n, t| f(&format!("char.{n}"), t));
        }
        self.bilstm.visit(&mut |n, t| f(&format!("bilstm.{n}"), t));
        f("proj.w", &self.proj_w);
        f("proj.b", &self.proj_b);
        f("crf.transitions", &self.crf.transitions);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(enc) = &mut self.char_encoder {
            enc.visit_mut(&mut |n, t| f(&format!("char.{n}"), t));
        }
        self.bilstm.visit_mut(&mut |n, t| f(&format!("bilstm.{n}"), t));
        f("proj.w", &mut self.proj_w);
        f("proj.b", &mut self.proj_b);
        f("crf.transitions", &mut self.crf.transitions);
    }
}

/// Detected disease spans of one abstract, as unresolved mentions.
pub fn predict_spans(model: &NerModel, doc: &Abstract, source: &TokenSource) -> Result<Vec<Mention>> {
    let mut warnings = Warnings::default();
    let sentences = preprocess(doc, &mut warnings)?;
    let chars = doc.chars();
    let per_sentence: Vec<Vec<Mention>> = sentences
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let tags = model.decode(&source.input(s)?)?;
            Ok(tagged_mentions(s, &tags, &chars))
        })
        .collect::<Result<_>>()?;
    Ok(per_sentence.into_iter().flatten().collect())
}

/// Unresolved mentions for the spans of a tag sequence over `sentence`.
pub fn tagged_mentions(sentence: &Sentence, tags: &TagSequence, chars: &[char]) -> Vec<Mention> {
    tags.spans()
        .iter()
        .map(|r| {
            let span = sentence.char_span(r);
            Mention {
                start: span.start,
                end: span.end,
                surface: span.slice(chars),
                concept: ConceptRef::Unresolved,
            }
        })
        .collect()
}
