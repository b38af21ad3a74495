use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::text::Span;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
}

impl Tag {
    pub const COUNT: usize = 3;
    pub const ALL: [Tag; 3] = [Tag::O, Tag::B, Tag::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TagSequence {
    pub tags: Vec<Tag>,
}

impl TagSequence {
    pub fn new(tags: Vec<Tag>) -> Self {
        Self { tags }
    }

    pub fn outside(len: usize) -> Self {
        Self::new(vec![Tag::O; len])
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.tags.iter().map(|t| t.index()).collect()
    }

    pub fn from_indices(indices: &[usize]) -> Self {
        Self::new(
            indices
                .iter()
                .map(|&i| Tag::from_index(i).expect("tag index in range"))
                .collect(),
        )
    }

    /// `I` never follows `O` or the sequence start.
    pub fn is_well_formed(&self) -> bool {
        let mut prev = Tag::O;
        for &t in &self.tags {
            if t == Tag::I && prev == Tag::O {
                return false;
            }
            prev = t;
        }
        true
    }

    /// Rewrites every orphan `I` to `B`.
    pub fn repaired(&self) -> Self {
        let mut prev = Tag::O;
        let tags = self
            .tags
            .iter()
            .map(|&t| {
                let fixed = if t == Tag::I && prev == Tag::O { Tag::B } else { t };
                prev = fixed;
                fixed
            })
            .collect();
        Self { tags }
    }

    /// Token ranges of the spans encoded by a (repaired) sequence.
    pub fn spans(&self) -> Vec<Range<usize>> {
        let tags = self.repaired().tags;
        let mut out = Vec::new();
        let mut open: Option<usize> = None;
        for (i, &t) in tags.iter().enumerate() {
            match t {
                Tag::B => {
                    if let Some(s) = open.take() {
                        out.push(s..i);
                    }
                    open = Some(i);
                }
                Tag::I => {}
                Tag::O => {
                    if let Some(s) = open.take() {
                        out.push(s..i);
                    }
                }
            }
        }
        if let Some(s) = open {
            out.push(s..tags.len());
        }
        out
    }
}

/// Result of projecting character-offset mentions onto tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IobProjection {
    pub tags: TagSequence,
    /// Covering token range per input mention; `None` when the mention was dropped.
    pub token_ranges: Vec<Option<Range<usize>>>,
    /// Mentions whose boundaries fell inside a token and were widened.
    pub misaligned: usize,
    /// Mentions dropped because no token covers them or widening made them collide.
    pub dropped: usize,
}

/// Tags tokens covered by each mention span: first `B`, rest `I`.
///
/// `mentions` are char spans already clipped to the sentence. Input spans
/// that overlap each other are an integrity error.
pub fn to_iob(tokens: &[Span], mentions: &[Span]) -> Result<IobProjection> {
    let mut order: Vec<usize> = (0..mentions.len()).collect();
    order.sort_by_key(|&i| (mentions[i].start, mentions[i].end));
    for w in order.windows(2) {
        if mentions[w[0]].overlaps(&mentions[w[1]]) {
            return Err(Error::Integrity(format!(
                "overlapping mentions at chars {}..{} and {}..{}",
                mentions[w[0]].start, mentions[w[0]].end, mentions[w[1]].start, mentions[w[1]].end
            )));
        }
    }
    let mut tags = TagSequence::outside(tokens.len());
    let mut token_ranges = vec![None; mentions.len()];
    let (mut misaligned, mut dropped) = (0, 0);
    for &m in &order {
        let span = mentions[m];
        let covering: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.overlaps(&span))
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (covering.first(), covering.last()) else {
            dropped += 1;
            continue;
        };
        if tags.tags[first..=last].iter().any(|&t| t != Tag::O) {
            dropped += 1;
            continue;
        }
        if tokens[first].start != span.start || tokens[last].end != span.end {
            misaligned += 1;
        }
        tags.tags[first] = Tag::B;
        for t in &mut tags.tags[first + 1..=last] {
            *t = Tag::I;
        }
        token_ranges[m] = Some(first..last + 1);
    }
    Ok(IobProjection {
        tags,
        token_ranges,
        misaligned,
        dropped,
    })
}
