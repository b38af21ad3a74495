//! Trainable character-level token encoders.
//!
//! Both built-in kinds embed characters through a shared lookup table where
//! row 0 is reserved for characters outside the training vocabulary:
//!
//! - `bilstm`: final forward and backward LSTM states, concatenated
//! - `cnn`: width-3 convolution (one zero pad each side), max-pooled over
//!   positions, no activation
//!
//! An empty token encodes to the zero vector.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use taxolink_numerics::params::{visit_nested, visit_nested_mut};
use taxolink_numerics::tensor::gemv_acc;
use taxolink_numerics::{Grads, Parameterized, Rng, Tensor};

use super::lstm::{lstm_backward, lstm_forward, LstmCache, LstmParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for CharVocab {
    fn from(chars: Vec<char>) -> Self {
        Self::from_chars(chars)
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

impl CharVocab {
    /// Index 0 is the unknown character; known characters follow in sorted order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = words.into_iter().flat_map(str::chars).collect();
        Self::from_chars(set.into_iter().collect())
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { chars, index }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Table rows needed, including the unknown row.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn index(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(0)
    }

    pub fn ids(&self, token: &str) -> Vec<usize> {
        token.chars().map(|c| self.index(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharConfig {
    pub kind: String,
    pub dim: usize,
    /// Per-direction hidden size of the `bilstm` kind.
    pub hidden: usize,
    /// Filter count of the `cnn` kind.
    pub filters: usize,
}

impl Default for CharConfig {
    fn default() -> Self {
        Self {
            kind: "bilstm".into(),
            dim: 60,
            hidden: 25,
            filters: 50,
        }
    }
}

/// Whatever an encoder needs to backpropagate one token.
pub enum CharCache {
    Empty,
    Lstm {
        ids: Vec<usize>,
        forward: LstmCache,
        backward: LstmCache,
    },
    Cnn {
        ids: Vec<usize>,
        /// Winning window start per filter.
        argmax: Vec<usize>,
    },
    Custom(Box<dyn Any + Send>),
}

impl fmt::Debug for CharCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CharCache::Empty => f.write_str("Empty"),
            CharCache::Lstm { ids, .. } => write!(f, "Lstm({} chars)", ids.len()),
            CharCache::Cnn { ids, .. } => write!(f, "Cnn({} chars)", ids.len()),
            CharCache::Custom(_) => f.write_str("Custom"),
        }
    }
}

pub trait CharEncoder: Parameterized + Send + Sync {
    fn kind(&self) -> &str;

    fn vocab(&self) -> &CharVocab;

    fn output_dim(&self) -> usize;

    fn encode(&self, token: &str) -> (Vec<f64>, CharCache);

    /// Adds this token's parameter gradients, given `∂loss/∂output`, to `grads`
    /// (names relative to this encoder).
    fn backward(&self, cache: &CharCache, d_out: &[f64], grads: &mut Grads) -> Result<()>;

    fn clone_box(&self) -> Box<dyn CharEncoder>;
}

impl Clone for Box<dyn CharEncoder> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

impl fmt::Debug for dyn CharEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CharEncoder({}, out {})", self.kind(), self.output_dim())
    }
}

fn embedding_table(rows: usize, dim: usize, rng: &mut Rng) -> Tensor {
    let bound = (3.0 / dim as f64).sqrt();
    Tensor::matrix(rows, dim, (0..rows * dim).map(|_| rng.uniform_range(-bound, bound)).collect())
        .expect("sized")
}

fn add_embedding_grad(grads: &mut Grads, dim: usize, rows: usize, ids: &[usize], d_rows: &Tensor) {
    let mut g = Tensor::zeros(&[rows, dim]);
    for (k, &id) in ids.iter().enumerate() {
        for (a, b) in g.row_mut(id).iter_mut().zip(d_rows.row(k)) {
            *a += b;
        }
    }
    grads.accumulate("emb", &g, 1.0);
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCharEncoder {
    vocab: CharVocab,
    pub emb: Tensor,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl LstmCharEncoder {
    pub fn new(vocab: CharVocab, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let emb = embedding_table(vocab.size(), dim, rng);
        Self {
            vocab,
            emb,
            forward: LstmParams::new(dim, hidden, rng),
            backward: LstmParams::new(dim, hidden, rng),
        }
    }
}

impl Parameterized for LstmCharEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("emb", &self.emb);
        visit_nested("fwd", &self.forward, f);
        visit_nested("bwd", &self.backward, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("emb", &mut self.emb);
        visit_nested_mut("fwd", &mut self.forward, f);
        visit_nested_mut("bwd", &mut self.backward, f);
    }
}

impl CharEncoder for LstmCharEncoder {
    fn kind(&self) -> &str {
        "bilstm"
    }

    fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    fn output_dim(&self) -> usize {
        2 * self.forward.hidden()
    }

    fn encode(&self, token: &str) -> (Vec<f64>, CharCache) {
        let ids = self.vocab.ids(token);
        let h = self.forward.hidden();
        if ids.is_empty() {
            return (vec![0.0; 2 * h], CharCache::Empty);
        }
        let rows: Vec<&[f64]> = ids.iter().map(|&i| self.emb.row(i)).collect();
        let reversed: Vec<&[f64]> = rows.iter().rev().copied().collect();
        let (hf, cf) = lstm_forward(&self.forward, &rows);
        let (hb, cb) = lstm_forward(&self.backward, &reversed);
        let n = ids.len();
        let mut out = hf.row(n - 1).to_vec();
        out.extend_from_slice(hb.row(n - 1));
        (
            out,
            CharCache::Lstm {
                ids,
                forward: cf,
                backward: cb,
            },
        )
    }

    fn backward(&self, cache: &CharCache, d_out: &[f64], grads: &mut Grads) -> Result<()> {
        let (ids, cf, cb) = match cache {
            CharCache::Empty => return Ok(()),
            CharCache::Lstm { ids, forward, backward } => (ids, forward, backward),
            other => return Err(Error::Training(format!("bilstm char encoder got cache {other:?}"))),
        };
        let (n, h, d) = (ids.len(), self.forward.hidden(), self.emb.cols());
        let mut df = Tensor::zeros(&[n, h]);
        df.row_mut(n - 1).copy_from_slice(&d_out[..h]);
        let mut db = Tensor::zeros(&[n, h]);
        db.row_mut(n - 1).copy_from_slice(&d_out[h..]);
        let (gf, dxf) = lstm_backward(&self.forward, cf, &df);
        let (gb, dxb) = lstm_backward(&self.backward, cb, &db);
        grads.merge(&Grads::collect(Some("fwd"), &gf), 1.0);
        grads.merge(&Grads::collect(Some("bwd"), &gb), 1.0);
        let mut d_rows = dxf;
        for k in 0..n {
            for (a, b) in d_rows.row_mut(k).iter_mut().zip(dxb.row(n - 1 - k)) {
                *a += b;
            }
        }
        add_embedding_grad(grads, d, self.emb.rows(), ids, &d_rows);
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn CharEncoder> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnCharEncoder {
    vocab: CharVocab,
    pub emb: Tensor,
    /// `filters × 3·dim`, each row a flattened window of three char vectors.
    pub weight: Tensor,
    pub bias: Tensor,
}

const WIDTH: usize = 3;

impl CnnCharEncoder {
    pub fn new(vocab: CharVocab, dim: usize, filters: usize, rng: &mut Rng) -> Self {
        let emb = embedding_table(vocab.size(), dim, rng);
        let fan = WIDTH * dim;
        let bound = (6.0 / (fan + filters) as f64).sqrt();
        let weight = Tensor::matrix(filters, fan, (0..filters * fan).map(|_| rng.uniform_range(-bound, bound)).collect())
            .expect("sized");
        Self {
            vocab,
            emb,
            weight,
            bias: Tensor::zeros(&[filters]),
        }
    }

    /// Flattened window starting at padded position `s` (pad rows are zero).
    fn window(&self, ids: &[usize], s: usize) -> Vec<f64> {
        let d = self.emb.cols();
        let mut w = vec![0.0; WIDTH * d];
        for k in 0..WIDTH {
            let p = s + k;
            if p >= 1 && p <= ids.len() {
                w[k * d..(k + 1) * d].copy_from_slice(self.emb.row(ids[p - 1]));
            }
        }
        w
    }
}

impl Parameterized for CnnCharEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("emb", &self.emb);
        f("conv.weight", &self.weight);
        f("conv.bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("emb", &mut self.emb);
        f("conv.weight", &mut self.weight);
        f("conv.bias", &mut self.bias);
    }
}

impl CharEncoder for CnnCharEncoder {
    fn kind(&self) -> &str {
        "cnn"
    }

    fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn encode(&self, token: &str) -> (Vec<f64>, CharCache) {
        let ids = self.vocab.ids(token);
        let filters = self.weight.rows();
        if ids.is_empty() {
            return (vec![0.0; filters], CharCache::Empty);
        }
        let mut best = vec![f64::NEG_INFINITY; filters];
        let mut argmax = vec![0; filters];
        // with one pad each side there are exactly `len` windows
        for s in 0..ids.len() {
            let w = self.window(&ids, s);
            let mut conv = self.bias.data().to_vec();
            gemv_acc(self.weight.data(), filters, w.len(), &w, &mut conv);
            for (f, &v) in conv.iter().enumerate() {
                if v > best[f] {
                    best[f] = v;
                    argmax[f] = s;
                }
            }
        }
        (best, CharCache::Cnn { ids, argmax })
    }

    fn backward(&self, cache: &CharCache, d_out: &[f64], grads: &mut Grads) -> Result<()> {
        let (ids, argmax) = match cache {
            CharCache::Empty => return Ok(()),
            CharCache::Cnn { ids, argmax } => (ids, argmax),
            other => return Err(Error::Training(format!("cnn char encoder got cache {other:?}"))),
        };
        let d = self.emb.cols();
        let fan = WIDTH * d;
        let filters = self.weight.rows();
        let mut dw = Tensor::zeros(&[filters, fan]);
        let mut d_rows = Tensor::zeros(&[ids.len(), d]);
        for f in 0..filters {
            let g = d_out[f];
            if g == 0.0 {
                continue;
            }
            let s = argmax[f];
            let w = self.window(ids, s);
            for (a, b) in dw.row_mut(f).iter_mut().zip(&w) {
                *a += g * b;
            }
            let dwin: Vec<f64> = self.weight.row(f).iter().map(|v| g * v).collect();
            for k in 0..WIDTH {
                let p = s + k;
                if p >= 1 && p <= ids.len() {
                    for (a, b) in d_rows.row_mut(p - 1).iter_mut().zip(&dwin[k * d..(k + 1) * d]) {
                        *a += b;
                    }
                }
            }
        }
        grads.accumulate("conv.weight", &dw, 1.0);
        grads.accumulate("conv.bias", &Tensor::vector(d_out.to_vec()), 1.0);
        add_embedding_grad(grads, d, self.emb.rows(), ids, &d_rows);
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn CharEncoder> {
        Box::new(self.clone())
    }
}

pub type CharEncoderFactory = fn(CharVocab, &CharConfig, &mut Rng) -> Box<dyn CharEncoder>;

/// Name → constructor map for character encoders.
#[derive(Clone)]
pub struct CharEncoderRegistry {
    entries: BTreeMap<String, CharEncoderFactory>,
}

impl Default for CharEncoderRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl CharEncoderRegistry {
    pub fn builtin() -> Self {
        let mut entries: BTreeMap<String, CharEncoderFactory> = BTreeMap::new();
        entries.insert("bilstm".into(), |v, c, r| Box::new(LstmCharEncoder::new(v, c.dim, c.hidden, r)));
        entries.insert("cnn".into(), |v, c, r| Box::new(CnnCharEncoder::new(v, c.dim, c.filters, r)));
        Self { entries }
    }

    pub fn register(&mut self, name: &str, factory: CharEncoderFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn build(&self, vocab: CharVocab, cfg: &CharConfig, rng: &mut Rng) -> Result<Box<dyn CharEncoder>> {
        let factory = self.entries.get(&cfg.kind).ok_or_else(|| {
            Error::Config(format!(
                "unknown character encoder `{}` (known: {})",
                cfg.kind,
                self.names().join(", ")
            ))
        })?;
        Ok(factory(vocab, cfg, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use taxolink_numerics::{finite_difference_gradient, relative_error};

    fn vocab() -> CharVocab {
        CharVocab::build(["abc", "cde"])
    }

    fn encoders(seed: u64) -> Vec<Box<dyn CharEncoder>> {
        let reg = CharEncoderRegistry::builtin();
        let mut rng = Rng::seeded(seed);
        let mut out = Vec::new();
        for kind in ["bilstm", "cnn"] {
            let cfg = CharConfig { kind: kind.into(), dim: 3, hidden: 2, filters: 4 };
            out.push(reg.build(vocab(), &cfg, &mut rng).unwrap());
        }
        out
    }

    #[test]
    fn vocab_reserves_unknown() {
        let v = vocab();
        assert_eq!(v.size(), 6);
        assert_eq!(v.ids("az"), vec![1, 0]);
    }

    #[test]
    fn empty_token_is_zero() {
        for e in encoders(1) {
            let (out, _) = e.encode("");
            assert!(out.iter().all(|&v| v == 0.0), "{}", e.kind());
            assert_eq!(out.len(), e.output_dim());
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        for mut e in encoders(2) {
            e.visit_mut(&mut |n, t| {
                if n != "emb" {
                    *t = Tensor::zeros_like(t);
                }
            });
            let (out, _) = e.encode("abcx");
            assert!(out.iter().all(|&v| v == 0.0), "{}", e.kind());
        }
    }

    #[test]
    fn deterministic() {
        for e in encoders(3) {
            assert_eq!(e.encode("cab").0, e.encode("cab").0);
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        let cfg = CharConfig { kind: "gru".into(), ..CharConfig::default() };
        assert!(CharEncoderRegistry::builtin().build(vocab(), &cfg, &mut Rng::seeded(0)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            for e in encoders(seed) {
                let mut rng = Rng::seeded(100 + seed);
                let token: String = (0..1 + rng.below(5)).map(|_| ['a', 'b', 'c', 'd', 'e', 'z'][rng.below(6)]).collect();
                let w: Vec<f64> = (0..e.output_dim()).map(|_| rng.normal(0.0, 1.0)).collect();
                let (_, cache) = e.encode(&token);
                let mut grads = Grads::new();
                e.backward(&cache, &w, &mut grads).unwrap();
                for name in e.param_names() {
                    let theta = e.get_param(&name).unwrap();
                    let numeric = finite_difference_gradient(
                        |v| {
                            let mut q = e.clone();
                            q.set_param(&name, v).unwrap();
                            q.encode(&token).0.iter().zip(&w).map(|(a, b)| a * b).sum()
                        },
                        &theta,
                        1e-6,
                    )
                    .unwrap();
                    let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros_like(&theta));
                    let err = relative_error(&analytic, &numeric);
                    assert!(err < 1e-4, "seed {seed} {} {name} `{token}`: {err}", e.kind());
                }
            }
        }
    }
}
