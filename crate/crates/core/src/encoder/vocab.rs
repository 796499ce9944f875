use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Sentence;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Lowercased whitespace-token vocabulary with fixed special ids 0–4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Special tokens keep their casing; everything else is lowercased.
pub fn normalize(token: &str) -> String {
    if SPECIALS.contains(&token) {
        token.to_owned()
    } else {
        token.to_lowercase()
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Validation(format!("special token {s} must have id {i}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Specials, then `extra` tokens, then corpus tokens in first-occurrence
    /// order (minimum frequency 1).
    pub fn build<'a>(sentences: &'a [Sentence], extra: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let corpus_tokens = sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str));
        for t in extra.into_iter().chain(corpus_tokens) {
            for w in t.split_whitespace() {
                let n = normalize(w);
                if seen.insert(n.clone()) {
                    tokens.push(n);
                }
            }
        }
        Self::from_tokens(tokens).expect("specials placed first")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(&normalize(token)).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(&normalize(token))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Ids for `[CLS] tokens [SEP]` plus the position of every original token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// Encoder positions of each original token; empty when truncated away.
    pub alignment: Vec<Vec<usize>>,
    /// Number of original tokens dropped to fit `max_len`.
    pub truncated: usize,
}

impl Tokenized {
    /// Original tokens that survived truncation.
    pub fn kept(&self) -> usize {
        self.alignment.len() - self.truncated
    }
}

pub fn tokenize(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Tokenized {
    let room = max_len.saturating_sub(2);
    let kept = tokens.len().min(room);
    let mut ids = Vec::with_capacity(kept + 2);
    ids.push(CLS_ID);
    let mut alignment = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        if i < kept {
            alignment.push(vec![ids.len()]);
            ids.push(vocab.id(t));
        } else {
            alignment.push(Vec::new());
        }
    }
    ids.push(SEP_ID);
    Tokenized {
        ids,
        alignment,
        truncated: tokens.len() - kept,
    }
}
