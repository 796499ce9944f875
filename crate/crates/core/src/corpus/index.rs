use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::Sentence;

/// Label → distinct entity surface forms (as token sequences).
///
/// Labels iterate in sorted order; forms keep first-occurrence order and
/// casing, deduplicated case-insensitively.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityIndex {
    entries: BTreeMap<String, Vec<Vec<String>>>,
}

impl EntityIndex {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entities(&self, label: &str) -> &[Vec<String>] {
        self.entries.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.entries.contains_key(label)
    }
}

pub fn build_entity_index(sentences: &[Sentence]) -> EntityIndex {
    let mut entries: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for s in sentences {
        for span in &s.spans {
            let form = s.span_tokens(span).to_vec();
            let key = (span.label.clone(), form.join(" ").to_lowercase());
            if seen.insert(key) {
                entries.entry(span.label.clone()).or_default().push(form);
            }
        }
    }
    EntityIndex { entries }
}
