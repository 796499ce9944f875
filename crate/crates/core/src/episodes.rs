//! N-way K~2K-shot episode sampling, validation and JSONL persistence.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_set, Sentence};
use crate::error::{Error, Result};
use crate::seed;

/// One few-shot task: N class names, a support set and a query set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub types: Vec<String>,
    pub support: Vec<Sentence>,
    pub query: Vec<Sentence>,
}

impl Episode {
    pub fn mention_counts(sentences: &[Sentence]) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for s in sentences {
            for sp in &s.spans {
                *counts.entry(sp.label.as_str()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn type_index(&self, label: &str) -> Option<usize> {
        self.types.iter().position(|t| t == label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Tightens the per-type upper bound from 2K to K.
    pub exact_k: bool,
    /// Sentence draws allowed per set before giving up.
    pub max_draws: usize,
}

impl SamplerConfig {
    pub fn new(n_way: usize, k_shot: usize) -> Self {
        Self {
            n_way,
            k_shot,
            exact_k: false,
            max_draws: 10_000,
        }
    }

    pub fn upper(&self) -> usize {
        if self.exact_k {
            self.k_shot
        } else {
            2 * self.k_shot
        }
    }
}

/// Greedy quota filling over eligible sentence indices.
fn fill_quota(
    corpus: &[Sentence],
    eligible: &[usize],
    types: &[String],
    cfg: &SamplerConfig,
    excluded: &HashSet<&Sentence>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut counts: BTreeMap<&str, usize> = types.iter().map(|t| (t.as_str(), 0)).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut taken: HashSet<usize> = HashSet::new();
    let upper = cfg.upper();
    let done = |c: &BTreeMap<&str, usize>| c.values().all(|v| *v >= cfg.k_shot);
    let mut draws = 0;
    while !done(&counts) {
        if draws >= cfg.max_draws || taken.len() == eligible.len() {
            let (label, have) = counts
                .iter()
                .filter(|(_, c)| **c < cfg.k_shot)
                .min_by_key(|(_, c)| **c)
                .expect("some type is below quota");
            return Err(Error::SamplingExhausted(format!(
                "type {label} has {have} of {} required mentions after {draws} draws",
                cfg.k_shot
            )));
        }
        draws += 1;
        let idx = eligible[rng.gen_range(0..eligible.len())];
        if !taken.insert(idx) {
            continue;
        }
        let s = &corpus[idx];
        if excluded.contains(s) {
            continue;
        }
        let fits = Episode::mention_counts(std::slice::from_ref(s))
            .iter()
            .all(|(l, c)| counts[l] + c <= upper);
        if !fits {
            continue;
        }
        for sp in &s.spans {
            *counts.get_mut(sp.label.as_str()).expect("eligible") += 1;
        }
        chosen.push(idx);
    }
    Ok(chosen)
}

/// Samples one episode: N types uniformly, then support and query sets by
/// greedy quota filling over sentences whose entities all belong to the
/// chosen types. Query sentences never repeat a support sentence.
pub fn sample_episode(corpus: &[Sentence], cfg: &SamplerConfig, seed: u64) -> Result<Episode> {
    let labels = label_set(corpus);
    if labels.len() < cfg.n_way {
        return Err(Error::SamplingExhausted(format!(
            "corpus has {} labels, {}-way episodes need {}",
            labels.len(),
            cfg.n_way,
            cfg.n_way
        )));
    }
    if cfg.k_shot == 0 {
        return Err(Error::invalid("k_shot must be positive"));
    }
    let mut rng = seed::rng(seed);
    let types: Vec<String> = index::sample(&mut rng, labels.len(), cfg.n_way)
        .into_iter()
        .map(|i| labels[i].clone())
        .collect();
    let type_set: HashSet<&str> = types.iter().map(String::as_str).collect();
    let eligible: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.spans.is_empty() && s.spans.iter().all(|sp| type_set.contains(sp.label.as_str())))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::SamplingExhausted(format!(
            "type {} has no eligible sentences",
            types[0]
        )));
    }
    let support_idx = fill_quota(corpus, &eligible, &types, cfg, &HashSet::new(), &mut rng)?;
    let support: Vec<Sentence> = support_idx.iter().map(|i| corpus[*i].clone()).collect();
    let excluded: HashSet<&Sentence> = support.iter().collect();
    let query_idx = fill_quota(corpus, &eligible, &types, cfg, &excluded, &mut rng)?;
    let query = query_idx.iter().map(|i| corpus[*i].clone()).collect();
    Ok(Episode {
        types,
        support,
        query,
    })
}

/// Samples `count` episodes with per-episode seeds derived from `seed`.
pub fn sample_episodes(
    corpus: &[Sentence],
    cfg: &SamplerConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| sample_episode(corpus, cfg, seed::derive_indexed(seed, "episode", i as u64)))
        .collect()
}

/// Every violated episode invariant; empty iff the episode is valid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_episode(ep: &Episode, cfg: &SamplerConfig) -> ValidationReport {
    let mut v = Vec::new();
    let (n, k) = (cfg.n_way, cfg.k_shot);
    if ep.types.len() != n {
        v.push(format!("{} types, expected {n}", ep.types.len()));
    }
    let distinct: HashSet<&str> = ep.types.iter().map(String::as_str).collect();
    if distinct.len() != ep.types.len() {
        v.push("duplicate type names".to_owned());
    }
    for (set, sentences) in [("support", &ep.support), ("query", &ep.query)] {
        for (i, s) in sentences.iter().enumerate() {
            if let Err(e) = s.validate() {
                v.push(format!("{set} sentence {i}: {e}"));
            }
            for sp in &s.spans {
                if !distinct.contains(sp.label.as_str()) {
                    v.push(format!(
                        "{set} sentence {i}: span label {} not in episode types",
                        sp.label
                    ));
                }
            }
        }
    }
    let support_counts = Episode::mention_counts(&ep.support);
    let upper = cfg.upper();
    let bound = if cfg.exact_k { "K" } else { "2K" };
    for t in &ep.types {
        let c = support_counts.get(t.as_str()).copied().unwrap_or(0);
        if c < k {
            v.push(format!("type {t} count {c} < K ({k})"));
        }
        if c > upper {
            v.push(format!("type {t} count {c} > {bound} ({upper})"));
        }
    }
    let query_counts = Episode::mention_counts(&ep.query);
    for t in &ep.types {
        if query_counts.get(t.as_str()).copied().unwrap_or(0) == 0 {
            v.push(format!("type {t} has no query mention"));
        }
    }
    let support_set: HashSet<&Sentence> = ep.support.iter().collect();
    if ep.query.iter().any(|q| support_set.contains(q)) {
        v.push("support and query share a sentence".to_owned());
    }
    ValidationReport { violations: v }
}

pub fn write_episodes(episodes: &[Episode], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_episodes(text: &str) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(line).map_err(|e| {
            let message = e.to_string();
            if message.contains("out of bounds") || message.contains("overlap") {
                Error::Validation(format!("line {}: {message}", i + 1))
            } else {
                Error::Parse {
                    line: i + 1,
                    message,
                }
            }
        })?;
        out.push(ep);
    }
    Ok(out)
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_episodes(&text)
}
