//! biLSTM-CRF tagging of disease spans.
//!
//! Tokens are encoded by fixed vectors (optionally concatenated with a
//! trainable character encoder), re-encoded by a biLSTM, projected to CRF
//! emission potentials and decoded with Viterbi.

pub mod char_encoder;
pub mod crf;
pub mod lstm;
pub mod model;
pub mod train;

pub use char_encoder::{CharConfig, CharEncoder, CharEncoderRegistry, CharVocab};
pub use crf::{crf_log_likelihood, crf_nll_grads, viterbi_decode, CrfParams};
pub use lstm::{bilstm_backward, bilstm_forward, BiLstmParams, LstmParams};
pub use model::{predict_spans, tagged_mentions, InputMode, NerModel, TaggerInput, TaggerPass, TokenSource};
pub use train::{evaluate_tagger, tagged_sentences, train_ner, train_tagger, NerConfig, Schedule, TaggedSentence, TaggerOutcome};
