//! Disease mention recognition and taxonomy-embedding entity linking.
//!
//! The pipeline tags disease spans with a biLSTM-CRF, then links each span to
//! a concept of a disease taxonomy by a bilinear score against node
//! embeddings, normalized over the whole inventory. Node embeddings come from
//! one of several interchangeable sources (random-walk skip-gram, scope-note
//! lexicalized skip-gram, a graph convolution trained with the linker, or a
//! file); see [`node_source`].

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod gcn;
pub mod linker;
pub mod metrics;
pub mod mtl;
pub mod ner;
pub mod node_source;
pub mod node2vec;
pub mod pipeline;
pub mod taxonomy;

pub use error::{Error, Result};
