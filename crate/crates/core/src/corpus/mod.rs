//! Sentences with typed entity spans, BIO ingestion, the label → entity
//! index used for demonstration retrieval, and a synthetic corpus generator.

mod bio;
mod index;
mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bio::{parse_bio, parse_bio_with, to_bio, BioMode};
pub use index::{build_entity_index, EntityIndex};
pub use synth::{generate_synthetic_corpus, SynthConfig, Template};

/// An entity mention: inclusive token range plus class name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize, String)", into = "(usize, usize, String)")]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos <= self.end
    }
}

impl From<(usize, usize, String)> for EntitySpan {
    fn from((start, end, label): (usize, usize, String)) -> Self {
        Self { start, end, label }
    }
}

impl From<EntitySpan> for (usize, usize, String) {
    fn from(s: EntitySpan) -> Self {
        (s.start, s.end, s.label)
    }
}

/// A pre-tokenized sentence with flat, sorted, non-overlapping spans.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSentence")]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub spans: Vec<EntitySpan>,
}

#[derive(Deserialize)]
struct RawSentence {
    tokens: Vec<String>,
    #[serde(default)]
    spans: Vec<EntitySpan>,
}

impl TryFrom<RawSentence> for Sentence {
    type Error = Error;

    fn try_from(raw: RawSentence) -> Result<Self> {
        Sentence::new(raw.tokens, raw.spans)
    }
}

impl Sentence {
    /// Sorts spans by start and checks every invariant.
    pub fn new(tokens: Vec<String>, mut spans: Vec<EntitySpan>) -> Result<Self> {
        spans.sort();
        let s = Self { tokens, spans };
        s.validate()?;
        Ok(s)
    }

    pub fn from_words(words: &str, spans: Vec<EntitySpan>) -> Result<Self> {
        Self::new(words.split_whitespace().map(str::to_owned).collect(), spans)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation("sentence has no tokens".into()));
        }
        for (i, span) in self.spans.iter().enumerate() {
            if span.start > span.end || span.end >= self.tokens.len() {
                return Err(Error::Validation(format!(
                    "span ({}, {}, {}) out of bounds for {} tokens",
                    span.start,
                    span.end,
                    span.label,
                    self.tokens.len()
                )));
            }
            if span.label.is_empty() || span.label == "O" {
                return Err(Error::Validation(format!(
                    "span ({}, {}) has invalid label {:?}",
                    span.start, span.end, span.label
                )));
            }
            if i > 0 {
                let prev = &self.spans[i - 1];
                if prev.start > span.start || prev.overlaps(span) {
                    return Err(Error::Validation(format!(
                        "spans ({}, {}) and ({}, {}) overlap or are unsorted",
                        prev.start, prev.end, span.start, span.end
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span_tokens(&self, span: &EntitySpan) -> &[String] {
        &self.tokens[span.start..=span.end]
    }

    pub fn surface(&self, span: &EntitySpan) -> String {
        self.span_tokens(span).join(" ")
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.spans.iter().map(|s| s.label.as_str()).collect()
    }

    /// Token positions not covered by any span.
    pub fn outside_positions(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|p| !self.spans.iter().any(|s| s.contains(*p)))
            .collect()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Distinct labels across a corpus, sorted.
pub fn label_set(sentences: &[Sentence]) -> Vec<String> {
    let set: BTreeSet<&str> = sentences
        .iter()
        .flat_map(|s| s.spans.iter().map(|sp| sp.label.as_str()))
        .collect();
    set.into_iter().map(str::to_owned).collect()
}
