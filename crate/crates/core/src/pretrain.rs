//! Pre-training instances and objectives: demonstration-based masked
//! language modelling and class contrastive discrimination.
//!
//! A demonstration sample renders as
//!
//! ```text
//! [CLS] x [SEP] LD₁ [SEP] … LDₙ [SEP] RD₁ [SEP] … [SEP] ND₁ [SEP] … NDₘ
//! ```
//!
//! where each demonstration reads `e is l` (negative ones `e is O`).

use std::collections::HashSet;

use msdp_autograd::ndarray::Array2;
use msdp_autograd::{Tape, Var};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EntityIndex, Sentence};
use crate::encoder::{Vocabulary, CLS, MASK, MASK_ID, SEP};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_K_RD: usize = 5;
pub const DEFAULT_K_ND: usize = 3;
pub const DEFAULT_N_MASK: usize = 4;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.6;

const IS: &str = "is";
const OUTSIDE: &str = "O";

/// An `(entity, label)` pair shown as `entity is label`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub entity: Vec<String>,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    Entity,
    Label,
}

/// A maskable unit: every token of one entity (or label) occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskUnit {
    pub kind: UnitKind,
    pub positions: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Label,
    Retrieved,
    Negative,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrationSample {
    pub base_tokens: Vec<String>,
    pub ld: Vec<Demonstration>,
    pub rd: Vec<Demonstration>,
    pub nd: Vec<Demonstration>,
    /// Negative demonstrations requested but unavailable.
    pub nd_shortfall: usize,
    pub rendered: Vec<String>,
    pub units: Vec<MaskUnit>,
}

fn label_words(label: &str) -> impl Iterator<Item = String> + '_ {
    label.split_whitespace().map(str::to_owned)
}

impl DemonstrationSample {
    /// Position of the `[SEP]` closing the base sentence.
    pub fn first_sep(&self) -> usize {
        self.base_tokens.len() + 1
    }

    /// Splits the rendered demonstration part back into its three segments.
    pub fn parse_segments(&self) -> Option<[Vec<Vec<String>>; 3]> {
        let start = self.first_sep();
        if self.rendered.first().map(String::as_str) != Some(CLS)
            || self.rendered.get(start).map(String::as_str) != Some(SEP)
            || self.rendered[1..start] != self.base_tokens[..]
        {
            return None;
        }
        let pieces: Vec<Vec<String>> = self.rendered[start + 1..]
            .split(|t| t == SEP)
            .map(<[String]>::to_vec)
            .collect();
        let widths = [self.ld.len(), self.rd.len(), self.nd.len()].map(|n| n.max(1));
        if pieces.len() != widths.iter().sum::<usize>() {
            return None;
        }
        let mut out: [Vec<Vec<String>>; 3] = Default::default();
        let mut offset = 0;
        for (seg, (w, n)) in out
            .iter_mut()
            .zip(widths.iter().zip([self.ld.len(), self.rd.len(), self.nd.len()]))
        {
            *seg = pieces[offset..offset + n].to_vec();
            if n == 0 && !pieces[offset].is_empty() {
                return None;
            }
            offset += w;
        }
        Some(out)
    }

    /// Drops everything from `max_len` on; units touching the tail go too.
    pub fn truncate(&mut self, max_len: usize) {
        if self.rendered.len() <= max_len {
            return;
        }
        self.rendered.truncate(max_len);
        self.units
            .retain(|u| u.positions.iter().all(|p| *p < max_len));
    }
}

/// Contiguous non-entity fragments of 1–3 tokens, pairwise disjoint.
fn negative_fragments(x: &Sentence, k: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let outside: HashSet<usize> = x.outside_positions().into_iter().collect();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for start in 0..x.len() {
        for len in 1..=3 {
            let end = start + len - 1;
            if end < x.len() && (start..=end).all(|p| outside.contains(&p)) {
                candidates.push((start, end));
            }
        }
    }
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    while chosen.len() < k {
        let free: Vec<(usize, usize)> = candidates
            .iter()
            .copied()
            .filter(|(s, e)| chosen.iter().all(|(cs, ce)| e < cs || s > ce))
            .collect();
        let Some(pick) = free.choose(rng) else { break };
        chosen.push(*pick);
    }
    chosen
}

/// Builds the LD/RD/ND demonstrations for `x`; `None` when `x` has no entity.
pub fn build_demonstration(
    x: &Sentence,
    index: &EntityIndex,
    k_rd: usize,
    k_nd: usize,
    seed: u64,
) -> Option<DemonstrationSample> {
    if x.spans.is_empty() {
        return None;
    }
    let mut rng = seed::rng(seed);
    let ld: Vec<Demonstration> = x
        .spans
        .iter()
        .map(|s| Demonstration {
            entity: x.span_tokens(s).to_vec(),
            label: s.label.clone(),
        })
        .collect();

    let own: HashSet<(String, String)> = ld
        .iter()
        .map(|d| (d.label.clone(), d.entity.join(" ").to_lowercase()))
        .collect();
    let mut pool: Vec<Demonstration> = Vec::new();
    for label in x.labels() {
        for e in index.entities(label) {
            pool.push(Demonstration {
                entity: e.clone(),
                label: label.to_owned(),
            });
        }
    }
    let fresh: Vec<Demonstration> = pool
        .iter()
        .filter(|d| !own.contains(&(d.label.clone(), d.entity.join(" ").to_lowercase())))
        .cloned()
        .collect();
    let pool = if fresh.is_empty() { pool } else { fresh };
    let take = k_rd.min(pool.len());
    let rd: Vec<Demonstration> = index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();

    let fragments = negative_fragments(x, k_nd, &mut rng);
    let nd: Vec<Demonstration> = fragments
        .iter()
        .map(|(s, e)| Demonstration {
            entity: x.tokens[*s..=*e].to_vec(),
            label: OUTSIDE.to_owned(),
        })
        .collect();

    let mut rendered: Vec<String> = vec![CLS.to_owned()];
    rendered.extend(x.tokens.iter().cloned());
    let mut units = Vec::new();
    for segment in [&ld, &rd, &nd] {
        rendered.push(SEP.to_owned());
        for (i, d) in segment.iter().enumerate() {
            if i > 0 {
                rendered.push(SEP.to_owned());
            }
            let start = rendered.len();
            rendered.extend(d.entity.iter().cloned());
            units.push(MaskUnit {
                kind: UnitKind::Entity,
                positions: (start..rendered.len()).collect(),
            });
            rendered.push(IS.to_owned());
            let start = rendered.len();
            rendered.extend(label_words(&d.label));
            units.push(MaskUnit {
                kind: UnitKind::Label,
                positions: (start..rendered.len()).collect(),
            });
        }
    }
    Some(DemonstrationSample {
        base_tokens: x.tokens.clone(),
        ld,
        rd,
        nd_shortfall: k_nd - nd.len(),
        nd,
        rendered,
        units,
    })
}

/// Tokens a vocabulary needs to render demonstrations and label mentions.
pub fn demonstration_vocabulary(labels: &[String]) -> Vec<String> {
    let mut v = vec![IS.to_owned(), OUTSIDE.to_owned()];
    v.extend(labels.iter().flat_map(|l| label_words(l)));
    v
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedInstance {
    pub input_ids: Vec<usize>,
    pub masked_positions: Vec<usize>,
    pub target_ids: Vec<usize>,
}

/// Masks `min(n_mask, units)` whole units chosen uniformly without replacement.
pub fn mask_demonstration(
    sample: &DemonstrationSample,
    vocab: &Vocabulary,
    n_mask: usize,
    seed: u64,
) -> Result<MaskedInstance> {
    if sample.units.is_empty() {
        return Err(Error::invalid("demonstration sample has no maskable units"));
    }
    let mut rng = seed::rng(seed);
    let take = n_mask.min(sample.units.len());
    let mut positions: Vec<usize> = index::sample(&mut rng, sample.units.len(), take)
        .into_iter()
        .flat_map(|u| sample.units[u].positions.iter().copied())
        .collect();
    positions.sort_unstable();
    let original: Vec<usize> = sample.rendered.iter().map(|t| vocab.id(t)).collect();
    let mut input_ids = original.clone();
    for p in &positions {
        input_ids[*p] = MASK_ID;
    }
    Ok(MaskedInstance {
        input_ids,
        target_ids: positions.iter().map(|p| original[*p]).collect(),
        masked_positions: positions,
    })
}

/// `−Σ_m log P(x_m)` from per-masked-token vocabulary logits (k×V).
pub fn mlm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let (rows, vocab) = tape.shape(logits);
    if targets.is_empty() {
        return Err(Error::invalid("mlm_loss needs at least one masked token"));
    }
    if rows != targets.len() {
        return Err(Error::invalid(format!(
            "{rows} logit rows for {} targets",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| **t >= vocab) {
        return Err(Error::invalid(format!("target id {t} out of range")));
    }
    let logp = tape.log_softmax_rows(logits);
    let cells: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, t)| (i, *t)).collect();
    let picked = tape.pick(logp, &cells);
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0))
}

/// Sentence variants for class contrastive discrimination.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveSamples {
    /// One per entity: that entity replaced by its label mention.
    pub positives: Vec<Vec<String>>,
    /// Class of each positive.
    pub positive_labels: Vec<String>,
    /// Every entity replaced by a mention of a different label.
    pub hard_negative: Vec<String>,
}

fn substitute(x: &Sentence, replacements: &[Option<&str>]) -> Vec<String> {
    let mut out = Vec::with_capacity(x.len());
    let mut pos = 0;
    for (span, rep) in x.spans.iter().zip(replacements) {
        out.extend(x.tokens[pos..span.start].iter().cloned());
        match rep {
            Some(label) => out.extend(label_words(label)),
            None => out.extend(x.span_tokens(span).iter().cloned()),
        }
        pos = span.end + 1;
    }
    out.extend(x.tokens[pos..].iter().cloned());
    out
}

pub fn build_contrastive_samples(
    x: &Sentence,
    label_set: &[String],
    seed: u64,
) -> Result<ContrastiveSamples> {
    if x.spans.is_empty() {
        return Err(Error::invalid("contrastive samples need at least one entity"));
    }
    if label_set.len() < 2 {
        return Err(Error::invalid(
            "hard negatives need at least two labels in the label set",
        ));
    }
    let mut rng = seed::rng(seed);
    let k = x.spans.len();
    let positives = (0..k)
        .map(|i| {
            let reps: Vec<Option<&str>> = (0..k)
                .map(|j| (i == j).then_some(x.spans[j].label.as_str()))
                .collect();
            substitute(x, &reps)
        })
        .collect();
    let wrong: Vec<Option<&str>> = x
        .spans
        .iter()
        .map(|s| {
            let others: Vec<&String> = label_set.iter().filter(|l| **l != s.label).collect();
            Some(others.choose(&mut rng).expect("two or more labels").as_str())
        })
        .collect();
    Ok(ContrastiveSamples {
        positives,
        positive_labels: x.spans.iter().map(|s| s.label.clone()).collect(),
        hard_negative: substitute(x, &wrong),
    })
}

/// Most frequent label of a sentence; ties go to the earliest mention.
pub fn dominant_label(x: &Sentence) -> Option<&str> {
    let mut best: Option<(&str, usize)> = None;
    for s in &x.spans {
        let c = x.spans.iter().filter(|o| o.label == s.label).count();
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((&s.label, c));
        }
    }
    best.map(|(l, _)| l)
}

/// One source sentence in a contrastive batch.
#[derive(Clone, Debug)]
pub struct ContrastiveGroup {
    pub anchor: Var,
    pub positives: Vec<(Var, String)>,
    pub hard_negative: Var,
    /// Class tag used when this anchor serves as an in-batch negative.
    pub class: String,
}

#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub groups: Vec<ContrastiveGroup>,
    pub temperature: f64,
    /// Adds the positive term to its own denominator (standard SCL).
    pub include_positive_in_denominator: bool,
}

impl ContrastiveBatch {
    pub fn new(groups: Vec<ContrastiveGroup>, temperature: f64) -> Self {
        Self {
            groups,
            temperature,
            include_positive_in_denominator: false,
        }
    }
}

fn check_nonzero(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| *x == 0.0) {
        return Err(Error::invalid(format!("{what} has zero norm")));
    }
    Ok(())
}

/// Supervised contrastive loss with hard negatives.
///
/// For source group `i` with positives `k` of class `y_k`, each positive term
/// is weighted by how many of the group's positives share its class and
/// divided by the group's positive count, then averaged over groups. The
/// denominator holds in-batch anchors of other groups with a different class
/// tag plus the group's hard negative; the positive itself is absent unless
/// `include_positive_in_denominator` is set, so the loss can be negative.
pub fn scl_loss(tape: &mut Tape, batch: &ContrastiveBatch) -> Result<Var> {
    if !(batch.temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature {} must be positive",
            batch.temperature
        )));
    }
    if batch.groups.is_empty() {
        return Err(Error::invalid("empty contrastive batch"));
    }
    for g in &batch.groups {
        check_nonzero(tape, g.anchor, "anchor")?;
        check_nonzero(tape, g.hard_negative, "hard negative")?;
        if g.positives.is_empty() {
            return Err(Error::invalid("contrastive group without positives"));
        }
        for (p, _) in &g.positives {
            check_nonzero(tape, *p, "positive")?;
        }
    }
    let inv_t = 1.0 / batch.temperature;
    let mut group_terms = Vec::with_capacity(batch.groups.len());
    for (i, g) in batch.groups.iter().enumerate() {
        let k = g.positives.len();
        let mut negatives: Vec<Var> = batch
            .groups
            .iter()
            .enumerate()
            .filter(|(l, other)| *l != i && other.class != g.class)
            .map(|(_, other)| other.anchor)
            .collect();
        negatives.push(g.hard_negative);
        let neg = tape.concat_rows(&negatives);
        let pos_vars: Vec<Var> = g.positives.iter().map(|(v, _)| *v).collect();
        let pos = tape.concat_rows(&pos_vars);
        let s_pos = tape.cosine_rows(pos, g.anchor); // k×1
        let s_pos = tape.scale(s_pos, inv_t);
        let s_neg = tape.cosine_rows(g.anchor, neg); // 1×m
        let s_neg = tape.scale(s_neg, inv_t);

        let log_terms = if batch.include_positive_in_denominator {
            let ones = tape.leaf(Array2::ones((k, 1)));
            let spread = tape.matmul(ones, s_neg); // k×m
            let rows = tape.concat_cols(&[s_pos, spread]);
            let logp = tape.log_softmax_rows(rows);
            let cells: Vec<(usize, usize)> = (0..k).map(|r| (r, 0)).collect();
            tape.pick(logp, &cells)
        } else {
            let lse = tape.log_sum_exp_rows(s_neg); // 1×1
            let ones = tape.leaf(Array2::ones((k, 1)));
            let lse_col = tape.matmul(ones, lse);
            tape.sub(s_pos, lse_col)
        };
        let weights = Array2::from_shape_fn((k, 1), |(r, _)| {
            let label = &g.positives[r].1;
            g.positives.iter().filter(|(_, l)| l == label).count() as f64 / k as f64
        });
        let weighted = tape.mul_const(log_terms, weights);
        group_terms.push(tape.sum_all(weighted));
    }
    let all = tape.concat_rows(&group_terms);
    let total = tape.sum_all(all);
    Ok(tape.scale(total, -1.0 / batch.groups.len() as f64))
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `α·L_mlm + (1−α)·L_scl`
pub fn joint_pretrain_loss(tape: &mut Tape, l_mlm: Var, l_scl: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let a = tape.scale(l_mlm, alpha);
    let b = tape.scale(l_scl, 1.0 - alpha);
    Ok(tape.add(a, b))
}

pub fn joint_pretrain_value(l_mlm: f64, l_scl: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_mlm + (1.0 - alpha) * l_scl)
}

/// Renders a masked instance back to tokens, for inspection dumps.
pub fn render_masked(sample: &DemonstrationSample, inst: &MaskedInstance) -> Vec<String> {
    let mut out = sample.rendered.clone();
    for p in &inst.masked_positions {
        out[*p] = MASK.to_owned();
    }
    out
}
