//! Rule-based sentence splitting and tokenization.
//!
//! All spans are in `char` offsets (not bytes), matching the offsets used by
//! PubTator annotations.

use serde::{Deserialize, Serialize};

/// Half-open `[start, end)` range of char offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, offset: usize) -> bool {
        self.start <= offset && offset < self.end
    }

    pub fn slice(&self, chars: &[char]) -> String {
        chars[self.start..self.end].iter().collect()
    }
}

/// Words ending in a period that never end a sentence.
const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "fig.", "figs.", "al.", "vs.", "cf.", "etc.", "dr.", "no.", "ca.", "approx.",
    "resp.", "ref.", "refs.", "st.", "mr.", "mrs.", "ms.", "prof.", "jr.", "sr.",
];

const CLOSERS: &[char] = &[')', ']', '"', '\''];

fn word_before(chars: &[char], end_inclusive: usize) -> String {
    let mut start = end_inclusive;
    while start > 0 && !chars[start - 1].is_whitespace() {
        start -= 1;
    }
    chars[start..=end_inclusive]
        .iter()
        .collect::<String>()
        .trim_start_matches(['(', '[', '"', '\''])
        .to_string()
}

fn is_abbreviation(word: &str) -> bool {
    let lower = word.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    // single capital letter followed by a period, e.g. an initial
    let mut it = word.chars();
    matches!((it.next(), it.next(), it.next()), (Some(c), Some('.'), None) if c.is_uppercase())
}

/// Splits `text` into sentence spans.
///
/// A boundary follows `.`, `!` or `?` (plus optional closing brackets or
/// quotes) when whitespace and then an uppercase letter or digit come next,
/// unless the terminating word is a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<Span> {
    let chars: Vec<char> = text.chars().collect();
    split_sentence_chars(&chars, 0, chars.len())
}

pub(crate) fn split_sentence_chars(chars: &[char], from: usize, to: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = from;
    let mut i = from;
    while i < to {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < to && CLOSERS.contains(&chars[j]) {
                j += 1;
            }
            let mut k = j;
            while k < to && chars[k].is_whitespace() {
                k += 1;
            }
            let boundary = k > j
                && k < to
                && (chars[k].is_uppercase() || chars[k].is_ascii_digit())
                && !(c == '.' && is_abbreviation(&word_before(chars, i)));
            if boundary {
                push_trimmed(chars, start, j, &mut spans);
                start = k;
                i = k;
                continue;
            }
        }
        i += 1;
    }
    push_trimmed(chars, start, to, &mut spans);
    spans
}

fn push_trimmed(chars: &[char], mut start: usize, mut end: usize, out: &mut Vec<Span>) {
    while start < end && chars[start].is_whitespace() {
        start += 1;
    }
    while end > start && chars[end - 1].is_whitespace() {
        end -= 1;
    }
    if start < end {
        out.push(Span::new(start, end));
    }
}

fn is_detachable(c: char) -> bool {
    c.is_ascii_punctuation() && c != '-'
}

/// Tokenizes a sentence: whitespace split, leading/trailing punctuation
/// detached one char at a time, internal `/` split out. Hyphens stay inside
/// tokens.
pub fn tokenize(sentence: &str) -> Vec<Span> {
    let chars: Vec<char> = sentence.chars().collect();
    tokenize_chars(&chars, 0, chars.len())
}

pub(crate) fn tokenize_chars(chars: &[char], from: usize, to: usize) -> Vec<Span> {
    let mut out = Vec::new();
    let mut i = from;
    while i < to {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let mut end = i;
        while end < to && !chars[end].is_whitespace() {
            end += 1;
        }
        tokenize_chunk(chars, i, end, &mut out);
        i = end;
    }
    out
}

fn tokenize_chunk(chars: &[char], mut a: usize, mut b: usize, out: &mut Vec<Span>) {
    while a < b && is_detachable(chars[a]) {
        out.push(Span::new(a, a + 1));
        a += 1;
    }
    let mut trailing = Vec::new();
    while b > a && is_detachable(chars[b - 1]) {
        trailing.push(Span::new(b - 1, b));
        b -= 1;
    }
    let mut piece = a;
    for k in a..b {
        if chars[k] == '/' {
            if piece < k {
                out.push(Span::new(piece, k));
            }
            out.push(Span::new(k, k + 1));
            piece = k + 1;
        }
    }
    if piece < b {
        out.push(Span::new(piece, b));
    }
    out.extend(trailing.into_iter().rev());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        let chars: Vec<char> = s.chars().collect();
        tokenize(s).iter().map(|sp| sp.slice(&chars)).collect()
    }

    #[test]
    fn two_sentences() {
        assert_eq!(
            split_sentences("A disease. Another one."),
            vec![Span::new(0, 10), Span::new(11, 23)]
        );
    }

    #[test]
    fn no_terminator_is_one_span() {
        assert_eq!(split_sentences("no terminator here"), vec![Span::new(0, 18)]);
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn abbreviations_do_not_split() {
        let s = "mutations in the X gene (e.g. exon 2) occur.";
        assert_eq!(split_sentences(s).len(), 1);
        assert_eq!(split_sentences("See Fig. 3 for details. Next.").len(), 2);
        assert_eq!(split_sentences("Reported by J. Smith today.").len(), 1);
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(split_sentences("levels were 2.5 vs. 3.1 in cases. also").len(), 1);
    }

    #[test]
    fn tokens_examples() {
        assert_eq!(words("ovarian cancer."), vec!["ovarian", "cancer", "."]);
        assert_eq!(words("T-PLL"), vec!["T-PLL"]);
        assert_eq!(words("(B-NHL)"), vec!["(", "B-NHL", ")"]);
        assert_eq!(words("breast/ovarian"), vec!["breast", "/", "ovarian"]);
        assert_eq!(words("e.g. 2.5%"), vec!["e.g", ".", "2.5", "%"]);
    }

    #[test]
    fn offsets_are_chars_not_bytes() {
        let s = "Sjögren syndrome";
        let t = tokenize(s);
        assert_eq!(t, vec![Span::new(0, 7), Span::new(8, 16)]);
    }
}
