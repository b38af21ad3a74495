//! Annotated abstracts in PubTator layout, and their sentence/token/IOB views.
//!
//! ```text
//! 10021369|t|Identification of APC2, a homologue of the adenomatous polyposis coli tumour suppressor.
//! 10021369|a|The adenomatous polyposis coli (APC) tumour-suppressor protein ...
//! 10021369<TAB>43<TAB>76<TAB>adenomatous polyposis coli tumour<TAB>Modifier<TAB>D011125
//! ```
//!
//! Offsets index the title and body joined by a single space, counted in
//! chars.

pub mod iob;
pub mod text;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use iob::{to_iob, IobProjection, Tag, TagSequence};
pub use text::{split_sentences, tokenize, Span};

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

/// Duplicated abstract in the official training file.
pub const REPEATED_TRAINING_ABSTRACT: &str = "8528200";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "training" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConceptRef {
    Resolved(String),
    Unresolved,
}

impl ConceptRef {
    pub fn id(&self) -> Option<&str> {
        match self {
            ConceptRef::Resolved(id) => Some(id),
            ConceptRef::Unresolved => None,
        }
    }
}

impl fmt::Display for ConceptRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConceptRef::Resolved(id) => f.write_str(id),
            ConceptRef::Unresolved => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub concept: ConceptRef,
}

impl Mention {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abstract {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub mentions: Vec<Mention>,
}

impl Abstract {
    /// Title and body joined by one space; mention offsets index this string.
    pub fn text(&self) -> String {
        format!("{} {}", self.title, self.body)
    }

    pub fn chars(&self) -> Vec<char> {
        self.text().chars().collect()
    }
}

/// Non-fatal issues counted while loading or preprocessing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warnings {
    pub composite_ids: usize,
    pub unmapped_omim: usize,
    pub unknown_concepts: usize,
    pub duplicate_docs: usize,
    pub misaligned_mentions: usize,
    pub cross_sentence_mentions: usize,
    pub dropped_mentions: usize,
}

impl Warnings {
    pub fn total(&self) -> usize {
        self.composite_ids
            + self.unmapped_omim
            + self.unknown_concepts
            + self.duplicate_docs
            + self.misaligned_mentions
            + self.cross_sentence_mentions
            + self.dropped_mentions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub abstracts: Vec<Abstract>,
    pub warnings: Warnings,
}

/// OMIM → MeSH identifier table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OmimMap {
    map: HashMap<String, String>,
}

impl OmimMap {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 || !cols[0].starts_with("OMIM:") || cols[1].trim().is_empty() {
                return Err(Error::parse(
                    path,
                    i + 1,
                    "expected `OMIM:id<TAB>MeSH_id`",
                ));
            }
            map.insert(cols[0].to_string(), strip_mesh_prefix(cols[1].trim()).to_string());
        }
        Ok(Self { map })
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, omim: &str) -> Option<&str> {
        self.map.get(omim).map(String::as_str)
    }
}

fn strip_mesh_prefix(id: &str) -> &str {
    id.strip_prefix("MESH:").unwrap_or(id)
}

/// Resolves one raw annotation id against the mapping and taxonomy.
fn resolve_id(
    raw: &str,
    omim: Option<&OmimMap>,
    taxonomy: Option<&Taxonomy>,
    warnings: &mut Warnings,
) -> ConceptRef {
    let raw = raw.trim();
    let first = match raw.find(['|', '+']) {
        Some(cut) => {
            warnings.composite_ids += 1;
            &raw[..cut]
        }
        None => raw,
    };
    if first.is_empty() || first == "-" {
        return ConceptRef::Unresolved;
    }
    let mesh = if first.starts_with("OMIM:") {
        match omim.and_then(|m| m.get(first)) {
            Some(id) => id.to_string(),
            None => {
                warnings.unmapped_omim += 1;
                return ConceptRef::Unresolved;
            }
        }
    } else {
        strip_mesh_prefix(first).to_string()
    };
    if let Some(tax) = taxonomy {
        if !tax.contains(&mesh) {
            warnings.unknown_concepts += 1;
            return ConceptRef::Unresolved;
        }
    }
    ConceptRef::Resolved(mesh)
}

impl Corpus {
    pub fn empty(split: Split) -> Self {
        Self {
            split,
            abstracts: Vec::new(),
            warnings: Warnings::default(),
        }
    }

    /// Reads a PubTator-style file. OMIM ids are rewritten through `omim`;
    /// ids unknown to `taxonomy` (when given) become unresolved.
    pub fn load(
        path: impl AsRef<Path>,
        split: Split,
        omim: Option<&OmimMap>,
        taxonomy: Option<&Taxonomy>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, split, omim, taxonomy)
    }

    pub fn parse(
        text: &str,
        path: &Path,
        split: Split,
        omim: Option<&OmimMap>,
        taxonomy: Option<&Taxonomy>,
    ) -> Result<Self> {
        let mut warnings = Warnings::default();
        let mut abstracts: Vec<Abstract> = Vec::new();
        let mut seen = HashSet::new();
        let mut current: Option<Abstract> = None;

        let mut finish = |doc: Option<Abstract>, abstracts: &mut Vec<Abstract>, warnings: &mut Warnings| -> Result<()> {
            let Some(mut doc) = doc else { return Ok(()) };
            doc.mentions.sort_by_key(|m| (m.start, m.end));
            for w in doc.mentions.windows(2) {
                if w[0].span().overlaps(&w[1].span()) {
                    return Err(Error::Integrity(format!(
                        "document {}: overlapping mentions at {}..{} and {}..{}",
                        doc.doc_id, w[0].start, w[0].end, w[1].start, w[1].end
                    )));
                }
            }
            if seen.insert(doc.doc_id.clone()) {
                abstracts.push(doc);
            } else {
                warnings.duplicate_docs += 1;
            }
            Ok(())
        };

        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                finish(current.take(), &mut abstracts, &mut warnings)?;
                continue;
            }
            if let Some((pmid, rest)) = line.split_once("|t|") {
                if !pmid.contains('\t') {
                    finish(current.take(), &mut abstracts, &mut warnings)?;
                    current = Some(Abstract {
                        doc_id: pmid.to_string(),
                        title: rest.to_string(),
                        body: String::new(),
                        mentions: Vec::new(),
                    });
                    continue;
                }
            }
            if let Some((pmid, rest)) = line.split_once("|a|") {
                if !pmid.contains('\t') {
                    match current.as_mut() {
                        Some(doc) if doc.doc_id == pmid => doc.body = rest.to_string(),
                        _ => {
                            return Err(Error::parse(
                                path,
                                lineno,
                                format!("abstract line for {pmid} without matching title"),
                            ))
                        }
                    }
                    continue;
                }
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 6 {
                return Err(Error::parse(path, lineno, "expected 6 tab-separated columns"));
            }
            let doc = match current.as_mut() {
                Some(doc) if doc.doc_id == cols[0] => doc,
                _ => {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("mention for {} outside its document block", cols[0]),
                    ))
                }
            };
            let parse_offset = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(path, lineno, format!("bad offset `{s}`")))
            };
            let (start, end) = (parse_offset(cols[1])?, parse_offset(cols[2])?);
            let chars: Vec<char> = doc.text().chars().collect();
            if start >= end || end > chars.len() {
                return Err(Error::Integrity(format!(
                    "document {}: mention offsets {start}..{end} outside text of length {}",
                    doc.doc_id,
                    chars.len()
                )));
            }
            let slice: String = chars[start..end].iter().collect();
            if slice != cols[3] {
                return Err(Error::Integrity(format!(
                    "document {}: surface `{}` does not match text `{slice}` at {start}..{end}",
                    doc.doc_id, cols[3]
                )));
            }
            let concept = resolve_id(cols[5], omim, taxonomy, &mut warnings);
            doc.mentions.push(Mention {
                start,
                end,
                surface: cols[3].to_string(),
                concept,
            });
        }
        finish(current.take(), &mut abstracts, &mut warnings)?;
        Ok(Self {
            split,
            abstracts,
            warnings,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.abstracts.is_empty()
    }

    pub fn mention_count(&self) -> usize {
        self.abstracts.iter().map(|a| a.mentions.len()).sum()
    }

    /// Splits, tokenizes and tags every abstract, in document order.
    pub fn sentences(&self) -> Result<(Vec<Sentence>, Warnings)> {
        let mut warnings = Warnings::default();
        let mut out = Vec::new();
        for doc in &self.abstracts {
            out.extend(preprocess(doc, &mut warnings)?);
        }
        Ok((out, warnings))
    }

    pub fn stats(&self) -> Result<CorpusStats> {
        let (sentences, _) = self.sentences()?;
        let unique_surfaces: BTreeSet<String> = self
            .abstracts
            .iter()
            .flat_map(|a| a.mentions.iter().map(|m| m.surface.to_lowercase()))
            .collect();
        let unique_concepts: BTreeSet<&str> = self
            .abstracts
            .iter()
            .flat_map(|a| a.mentions.iter().filter_map(|m| m.concept.id()))
            .collect();
        Ok(CorpusStats {
            abstracts: self.abstracts.len(),
            total_mentions: self.mention_count(),
            unique_mentions: unique_surfaces.len(),
            unique_concepts: unique_concepts.len(),
            sentences: sentences.len(),
            tokens: sentences.iter().map(|s| s.tokens.len()).sum(),
        })
    }
}

/// Counts mirroring the usual corpus statistics table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub abstracts: usize,
    pub total_mentions: usize,
    pub unique_mentions: usize,
    pub unique_concepts: usize,
    pub sentences: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceMention {
    pub tokens: Range<usize>,
    /// Token-aligned char span in the abstract text.
    pub span: Span,
    pub concept: ConceptRef,
}

/// One sentence of an abstract with its tokens and gold annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub doc_id: String,
    pub index: usize,
    pub span: Span,
    pub tokens: Vec<Span>,
    pub words: Vec<String>,
    pub tags: TagSequence,
    pub mentions: Vec<SentenceMention>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Char span covered by a token range.
    pub fn char_span(&self, tokens: &Range<usize>) -> Span {
        Span::new(self.tokens[tokens.start].start, self.tokens[tokens.end - 1].end)
    }
}

/// Sentence spans of an abstract: the title and the body are split separately.
pub fn sentence_spans(doc: &Abstract) -> Vec<Span> {
    let chars = doc.chars();
    let title_len = doc.title.chars().count();
    let mut spans = text::split_sentence_chars(&chars, 0, title_len);
    spans.extend(text::split_sentence_chars(&chars, title_len + 1, chars.len()));
    spans
}

/// Sentence/token/IOB view of one abstract.
///
/// A mention crossing a sentence boundary is assigned to the sentence that
/// contains its start and clipped to it.
pub fn preprocess(doc: &Abstract, warnings: &mut Warnings) -> Result<Vec<Sentence>> {
    let chars = doc.chars();
    let spans = sentence_spans(doc);
    let mut out = Vec::with_capacity(spans.len());
    for (index, sspan) in spans.iter().enumerate() {
        let tokens = text::tokenize_chars(&chars, sspan.start, sspan.end);
        // mentions starting in this sentence; a mention starting in the gap
        // between sentences goes to the following one
        let next_start = spans.get(index + 1).map_or(usize::MAX, |s| s.start);
        let lower = if index == 0 { 0 } else { sspan.start };
        let owned: Vec<&Mention> = doc
            .mentions
            .iter()
            .filter(|m| m.start >= lower && m.start < next_start)
            .collect();
        let mut clipped = Vec::with_capacity(owned.len());
        for m in &owned {
            let end = m.end.min(sspan.end);
            if end < m.end {
                warnings.cross_sentence_mentions += 1;
            }
            clipped.push(Span::new(m.start.max(sspan.start), end.max(m.start.max(sspan.start))));
        }
        let projection = to_iob(&tokens, &clipped).map_err(|e| match e {
            Error::Integrity(msg) => Error::Integrity(format!("document {}: {msg}", doc.doc_id)),
            other => other,
        })?;
        warnings.misaligned_mentions += projection.misaligned;
        warnings.dropped_mentions += projection.dropped;
        let mut mentions: Vec<SentenceMention> = owned
            .iter()
            .zip(&projection.token_ranges)
            .filter_map(|(m, r)| {
                r.clone().map(|range| SentenceMention {
                    span: Span::new(tokens[range.start].start, tokens[range.end - 1].end),
                    tokens: range,
                    concept: m.concept.clone(),
                })
            })
            .collect();
        mentions.sort_by_key(|m| m.tokens.start);
        out.push(Sentence {
            doc_id: doc.doc_id.clone(),
            index,
            span: *sspan,
            words: tokens.iter().map(|t| t.slice(&chars)).collect(),
            tokens,
            tags: projection.tags,
            mentions,
        });
    }
    Ok(out)
}
