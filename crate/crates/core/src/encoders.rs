//! Fixed pre-trained vectors: a static word table and per-sentence
//! contextual encodings, plus the average pooling used for mentions and
//! scope notes.
//!
//! Static table layout (word2vec text format):
//!
//! ```text
//! 2 3
//! polyposis 0.1 0.2 0.3
//! tumour -0.5 0.0 1.0
//! ```
//!
//! Contextual file layout: blocks headed `#DOC <doc_id> <sentence_index>`,
//! one `token<TAB>v1 v2 …` line per token, blocks separated by blank lines.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use taxolink_numerics::Tensor;

use crate::corpus::{tokenize, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: HashMap<String, usize>,
    tokens: Vec<String>,
    rows: Tensor,
    unk_row: Vec<f64>,
}

fn parse_values(
    fields: &[&str],
    dim: usize,
    path: &Path,
    line: usize,
) -> Result<Vec<f64>> {
    if fields.len() != dim {
        return Err(Error::parse(
            path,
            line,
            format!("expected {dim} values, found {}", fields.len()),
        ));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line, format!("non-numeric value `{f}`")))
        })
        .collect()
}

impl EmbeddingTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing `vocab_size dim` header"))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let parse_count = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(path, 1, format!("bad header value `{s}`")))
        };
        if head.len() != 2 {
            return Err(Error::parse(path, 1, "header must be `vocab_size dim`"));
        }
        let (size, dim) = (parse_count(head[0])?, parse_count(head[1])?);
        if dim == 0 {
            return Err(Error::parse(path, 1, "dimension must be positive"));
        }
        let mut tokens = Vec::with_capacity(size);
        let mut data = Vec::with_capacity(size * dim);
        for (i, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let values = parse_values(&fields[1..], dim, path, i + 1)?;
            tokens.push(fields[0].to_string());
            data.extend(values);
        }
        if tokens.len() != size {
            return Err(Error::parse(
                path,
                1,
                format!("header declares {size} rows, file has {}", tokens.len()),
            ));
        }
        Self::from_rows(tokens, Tensor::matrix(size, dim, data)?)
    }

    /// Builds a table from tokens and a matching row matrix. Duplicate tokens
    /// keep their first row.
    pub fn from_rows(tokens: Vec<String>, rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 || rows.rows() != tokens.len() || rows.cols() == 0 {
            return Err(Error::Config(format!(
                "embedding rows {:?} do not match {} tokens",
                rows.shape(),
                tokens.len()
            )));
        }
        let dim = rows.cols();
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            vocab.entry(t.clone()).or_insert(i);
        }
        let unk_row = if tokens.is_empty() {
            vec![0.0; dim]
        } else {
            pool_average(&rows)?
        };
        Ok(Self {
            dim,
            vocab,
            tokens,
            rows,
            unk_row,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_row(&self) -> &[f64] {
        &self.unk_row
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(token)
    }

    /// Row for `token`, falling back to its lowercase form, then to the
    /// unknown row.
    pub fn lookup(&self, token: &str) -> &[f64] {
        match self
            .vocab
            .get(token)
            .or_else(|| self.vocab.get(&token.to_lowercase()))
        {
            Some(&i) => self.rows.row(i),
            None => &self.unk_row,
        }
    }

    /// Writes `rows` in the same text format, one token per row.
    pub fn write(path: impl AsRef<Path>, tokens: &[String], rows: &Tensor) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", tokens.len(), rows.cols());
        for (i, t) in tokens.iter().enumerate() {
            out.push_str(t);
            for v in rows.row(i) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Arithmetic mean over the rows of a k×dim matrix.
pub fn pool_average(vectors: &Tensor) -> Result<Vec<f64>> {
    let k = vectors.rows();
    if k == 0 || vectors.rank() != 2 {
        return Err(Error::Span("cannot pool an empty set of vectors".into()));
    }
    let mut out = vec![0.0; vectors.cols()];
    for i in 0..k {
        for (o, v) in out.iter_mut().zip(vectors.row(i)) {
            *o += v;
        }
    }
    let inv = 1.0 / k as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// Mention vector: the mean of its token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionEncoding {
    pub vector: Vec<f64>,
}

/// Pre-computed contextual vectors for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualEncodings {
    pub doc_id: String,
    pub sentence_index: usize,
    pub tokens: Vec<String>,
    pub vectors: Tensor,
}

impl ContextualEncodings {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Averages the rows of a token range.
pub fn encode_mention(ctx: &ContextualEncodings, tokens: Range<usize>) -> Result<MentionEncoding> {
    pool_rows(&ctx.vectors, tokens).map(|vector| MentionEncoding { vector })
}

pub(crate) fn pool_rows(matrix: &Tensor, tokens: Range<usize>) -> Result<Vec<f64>> {
    if tokens.start >= tokens.end || tokens.end > matrix.rows() {
        return Err(Error::Span(format!(
            "token range {}..{} invalid for {} tokens",
            tokens.start,
            tokens.end,
            matrix.rows()
        )));
    }
    pool_average(&matrix.slice_rows(tokens.start, tokens.end)?)
}

/// Average of the table rows of a scope note's tokens; the unknown row for
/// an empty note.
pub fn encode_scope_note(table: &EmbeddingTable, note: &str) -> Vec<f64> {
    let chars: Vec<char> = note.chars().collect();
    let spans = tokenize(note);
    if spans.is_empty() {
        return table.unk_row().to_vec();
    }
    let mut out = vec![0.0; table.dim()];
    for span in &spans {
        for (o, v) in out.iter_mut().zip(table.lookup(&span.slice(&chars))) {
            *o += v;
        }
    }
    let inv = 1.0 / spans.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Token-level vectors of a sentence from the static table.
pub fn static_token_matrix(table: &EmbeddingTable, words: &[String]) -> Tensor {
    let mut data = Vec::with_capacity(words.len() * table.dim());
    for w in words {
        data.extend_from_slice(table.lookup(w));
    }
    Tensor::matrix(words.len(), table.dim(), data).expect("rows sized from table dim")
}

/// All contextual encodings of a file, keyed by `(doc_id, sentence_index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextualStore {
    dim: usize,
    blocks: HashMap<(String, usize), ContextualEncodings>,
}

impl ContextualStore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut store = Self::default();
        let mut header: Option<(String, usize, usize)> = None;
        let mut tokens = Vec::new();
        let mut data = Vec::new();
        let flush = |header: &mut Option<(String, usize, usize)>,
                         tokens: &mut Vec<String>,
                         data: &mut Vec<f64>,
                         store: &mut Self|
         -> Result<()> {
            if let Some((doc_id, idx, line)) = header.take() {
                let vectors = Tensor::matrix(tokens.len(), store.dim, std::mem::take(data))?;
                let key = (doc_id.clone(), idx);
                if store.blocks.contains_key(&key) {
                    return Err(Error::parse(path, line, format!("duplicate block {doc_id} {idx}")));
                }
                store.blocks.insert(
                    key,
                    ContextualEncodings {
                        doc_id,
                        sentence_index: idx,
                        tokens: std::mem::take(tokens),
                        vectors,
                    },
                );
            }
            Ok(())
        };
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                flush(&mut header, &mut tokens, &mut data, &mut store)?;
                continue;
            }
            if let Some(rest) = line.strip_prefix("#DOC") {
                flush(&mut header, &mut tokens, &mut data, &mut store)?;
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let idx = parts.get(1).and_then(|s| s.parse::<usize>().ok());
                match (parts.len(), idx) {
                    (2, Some(idx)) => header = Some((parts[0].to_string(), idx, lineno)),
                    _ => {
                        return Err(Error::parse(path, lineno, "expected `#DOC doc_id sentence_index`"))
                    }
                }
                continue;
            }
            if header.is_none() {
                return Err(Error::parse(path, lineno, "vector line outside a #DOC block"));
            }
            let (token, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected `token<TAB>values`"))?;
            let fields: Vec<&str> = values.split_whitespace().collect();
            if store.dim == 0 {
                store.dim = fields.len();
                if store.dim == 0 {
                    return Err(Error::parse(path, lineno, "empty vector"));
                }
            }
            data.extend(parse_values(&fields, store.dim, path, lineno)?);
            tokens.push(token.to_string());
        }
        flush(&mut header, &mut tokens, &mut data, &mut store)?;
        Ok(store)
    }

    pub fn insert(&mut self, enc: ContextualEncodings) -> Result<()> {
        if self.dim == 0 {
            self.dim = enc.vectors.cols();
        }
        if enc.vectors.cols() != self.dim || enc.vectors.rows() != enc.tokens.len() {
            return Err(Error::Config("contextual block has inconsistent dimensions".into()));
        }
        self.blocks
            .insert((enc.doc_id.clone(), enc.sentence_index), enc);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, doc_id: &str, sentence_index: usize) -> Option<&ContextualEncodings> {
        self.blocks.get(&(doc_id.to_string(), sentence_index))
    }

    /// Encodings for a tokenized sentence; the token count must match.
    pub fn for_sentence(&self, sentence: &Sentence) -> Result<&ContextualEncodings> {
        let enc = self.get(&sentence.doc_id, sentence.index).ok_or_else(|| {
            Error::Config(format!(
                "no contextual encodings for document {} sentence {}",
                sentence.doc_id, sentence.index
            ))
        })?;
        if enc.len() != sentence.len() {
            return Err(Error::Integrity(format!(
                "document {} sentence {}: {} contextual vectors for {} tokens",
                sentence.doc_id,
                sentence.index,
                enc.len(),
                sentence.len()
            )));
        }
        Ok(enc)
    }
}
