//! Deterministic tokenizer shared by chunking, budgeting and the mock providers.
//!
//! A token is either a maximal run of alphanumeric characters (plus any other
//! non-whitespace, non-punctuation characters) or a single punctuation
//! character. Whitespace separates tokens and is never part of one.

use std::ops::Range;

/// Byte span of one token inside the source string.
pub type Span = Range<usize>;

fn is_punct(c: char) -> bool {
    !c.is_whitespace() && !c.is_alphanumeric() && c != '_'
}

/// Byte spans of every token in `text`, in order.
pub fn token_spans(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = word_start.take() {
                spans.push(s..i);
            }
        } else if is_punct(c) {
            if let Some(s) = word_start.take() {
                spans.push(s..i);
            }
            spans.push(i..i + c.len_utf8());
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        spans.push(s..text.len());
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<&str> {
    token_spans(text).into_iter().map(|s| &text[s]).collect()
}

pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

/// Lowercased word tokens (punctuation dropped).
pub fn words(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(str::to_lowercase)
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "before", "both", "but", "by", "can", "could", "did", "do", "does", "each", "for", "from",
    "had", "has", "have", "he", "her", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "many", "more", "most", "much", "not", "of", "on", "one", "or", "other", "our", "out", "over",
    "she", "so", "some", "such", "than", "that", "the", "their", "them", "then", "there", "these",
    "they", "this", "those", "through", "to", "under", "up", "us", "was", "we", "were", "what",
    "when", "where", "which", "while", "who", "whom", "whose", "why", "will", "with", "would",
    "you", "your",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.binary_search(&word).is_ok()
}

/// Lowercased content words: `words` minus stopwords. Falls back to all
/// words when every word is a stopword.
pub fn content_words(text: &str) -> Vec<String> {
    let all = words(text);
    let content: Vec<String> = all.iter().filter(|w| !is_stopword(w)).cloned().collect();
    if content.is_empty() {
        all
    } else {
        content
    }
}

/// FNV-1a, 64-bit. Stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Split text into sentences on `.`, `!` and `?` followed by whitespace or
/// end of input. Returned slices are trimmed.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let next = i + 1;
            if next >= bytes.len() || (bytes[next] as char).is_whitespace() {
                let s = text[start..next].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = next;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Collapse every whitespace run to one space and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
