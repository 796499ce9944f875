use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EntitySpan, Sentence};
use crate::error::{Error, Result};
use crate::seed;

/// A sentence pattern: whitespace-separated words and `{LABEL}` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    parts: Vec<Part>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Part {
    Word(String),
    Slot(String),
}

impl Template {
    pub fn parse(pattern: &str) -> Result<Self> {
        let parts: Vec<Part> = pattern
            .split_whitespace()
            .map(|w| match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
                Some(label) if !label.is_empty() => Part::Slot(label.to_owned()),
                _ => Part::Word(w.to_owned()),
            })
            .collect();
        let slots = parts.iter().filter(|p| matches!(p, Part::Slot(_))).count();
        if !(1..=3).contains(&slots) {
            return Err(Error::Config(format!(
                "template {pattern:?} has {slots} slots, expected 1 to 3"
            )));
        }
        Ok(Self { parts })
    }

    pub fn slot_labels(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            Part::Slot(l) => Some(l.as_str()),
            Part::Word(_) => None,
        })
    }

    fn has_label(&self, label: &str) -> bool {
        self.slot_labels().any(|l| l == label)
    }
}

/// Generator configuration file: sentence count, templates, and one
/// lexicon file per label (one surface form per line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub templates: Vec<String>,
    pub lexicons: BTreeMap<String, PathBuf>,
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn templates(&self) -> Result<Vec<Template>> {
        self.templates.iter().map(|t| Template::parse(t)).collect()
    }

    /// Reads every lexicon; relative paths resolve against `base_dir`.
    pub fn load_lexicons(&self, base_dir: &Path) -> Result<BTreeMap<String, Vec<String>>> {
        let mut out = BTreeMap::new();
        for (label, rel) in &self.lexicons {
            let path = if rel.is_absolute() {
                rel.clone()
            } else {
                base_dir.join(rel)
            };
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::Config(format!(
                    "lexicon for label {label} ({}): {e}",
                    path.display()
                ))
            })?;
            let forms: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned)
                .collect();
            out.insert(label.clone(), forms);
        }
        Ok(out)
    }
}

/// Fills templates from lexicons. Each sentence starts from a label with the
/// fewest slots so far, keeping per-label counts close to uniform.
pub fn generate_synthetic_corpus(
    n_sentences: usize,
    lexicons: &BTreeMap<String, Vec<String>>,
    templates: &[Template],
    seed: u64,
) -> Result<Vec<Sentence>> {
    if templates.is_empty() {
        return Err(Error::Config("no templates".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in templates {
        for label in t.slot_labels() {
            match lexicons.get(label) {
                Some(forms) if !forms.is_empty() => {
                    counts.insert(label, 0);
                }
                Some(_) => {
                    return Err(Error::Config(format!("empty lexicon for label {label}")))
                }
                None => return Err(Error::Config(format!("no lexicon for label {label}"))),
            }
        }
    }
    let mut rng = seed::rng(seed::derive(seed, "synth"));
    let mut out = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let min = *counts.values().min().expect("at least one label");
        let neediest: Vec<&str> = counts
            .iter()
            .filter(|(_, c)| **c == min)
            .map(|(l, _)| *l)
            .collect();
        let label = neediest[rng.gen_range(0..neediest.len())];
        // Among templates with that label, prefer those adding the fewest
        // slots of already over-represented labels.
        let mean = counts.values().sum::<usize>() as f64 / counts.len() as f64;
        let excess = |t: &Template| {
            t.slot_labels()
                .filter(|l| counts[l] as f64 > mean)
                .count()
        };
        let candidates: Vec<&Template> = templates.iter().filter(|t| t.has_label(label)).collect();
        let best = candidates.iter().map(|t| excess(t)).min().expect("non-empty");
        let candidates: Vec<&Template> = candidates.into_iter().filter(|t| excess(t) == best).collect();
        let template = candidates.choose(&mut rng).expect("label comes from a template");

        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for part in &template.parts {
            match part {
                Part::Word(w) => tokens.push(w.clone()),
                Part::Slot(l) => {
                    let forms = &lexicons[l];
                    let form = &forms[rng.gen_range(0..forms.len())];
                    let start = tokens.len();
                    tokens.extend(form.split_whitespace().map(str::to_owned));
                    spans.push(EntitySpan::new(start, tokens.len() - 1, l.clone()));
                    *counts.get_mut(l.as_str()).expect("registered") += 1;
                }
            }
        }
        out.push(Sentence::new(tokens, spans)?);
    }
    Ok(out)
}
