//! Masked views, span representations, and the three prototype families.

use std::collections::BTreeMap;

use msdp_autograd::ndarray::Array2;
use msdp_autograd::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySpan, Sentence};
use crate::encoder::MASK;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "class", rename_all = "snake_case")]
pub enum ViewKind {
    Original,
    /// Masks every gold span whose label differs from the given class.
    ClassOriented(String),
    /// Masks every gold span.
    Contextual,
}

impl ViewKind {
    pub fn name(&self) -> String {
        match self {
            ViewKind::Original => "original".into(),
            ViewKind::ClassOriented(t) => format!("class_oriented:{t}"),
            ViewKind::Contextual => "contextual".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskView {
    pub view_kind: ViewKind,
    pub masked_tokens: Vec<String>,
}

pub fn apply_mask(x: &Sentence, view: &ViewKind, types: &[String]) -> Result<MaskView> {
    let masks = |s: &EntitySpan| match view {
        ViewKind::Original => false,
        ViewKind::ClassOriented(t) => s.label != *t,
        ViewKind::Contextual => true,
    };
    if let ViewKind::ClassOriented(t) = view {
        if !types.contains(t) {
            return Err(Error::invalid(format!("class {t} is not an episode type")));
        }
    }
    let mut tokens = x.tokens.clone();
    for s in x.spans.iter().filter(|s| masks(s)) {
        for t in &mut tokens[s.start..=s.end] {
            *t = MASK.to_owned();
        }
    }
    Ok(MaskView {
        view_kind: view.clone(),
        masked_tokens: tokens,
    })
}

/// Anything that maps a token sequence to per-token hidden rows on a tape.
///
/// The returned matrix has one row per token that survived truncation, in
/// order; tokens past the end have no row.
pub trait TokenEncoder {
    fn encode_tokens(&mut self, tape: &mut Tape, tokens: &[String]) -> Result<Var>;
}

/// `h_s + h_e`
pub fn span_rep(tape: &mut Tape, h: Var, start: usize, end: usize) -> Result<Var> {
    let len = tape.shape(h).0;
    if start > end || end >= len {
        return Err(Error::invalid(format!(
            "span ({start}, {end}) outside {len} positions"
        )));
    }
    let rows = tape.gather(h, &[start, end]);
    let ones = tape.leaf(Array2::ones((1, 2)));
    Ok(tape.matmul(ones, rows))
}

/// Mean of all sentence rows.
pub fn contextual_rep(tape: &mut Tape, h: Var) -> Result<Var> {
    if tape.shape(h).0 == 0 {
        return Err(Error::invalid("contextual representation of an empty sentence"));
    }
    Ok(tape.mean_rows(h))
}

/// Which auxiliary prototype families take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Families {
    pub class_oriented: bool,
    pub contextual: bool,
}

impl Families {
    pub const ALL: Families = Families {
        class_oriented: true,
        contextual: true,
    };
    pub const ORIGINAL_ONLY: Families = Families {
        class_oriented: false,
        contextual: false,
    };
}

/// Prototype rows (one per type, in `types` order) for each family.
#[derive(Clone, Debug)]
pub struct PrototypeVars {
    pub types: Vec<String>,
    pub original: Var,
    pub class_oriented: Option<Var>,
    pub contextual: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub types: Vec<String>,
    pub original: Array2<f64>,
    pub class_oriented: Option<Array2<f64>>,
    pub contextual: Option<Array2<f64>>,
}

impl PrototypeVars {
    pub fn values(&self, tape: &Tape) -> PrototypeSet {
        PrototypeSet {
            types: self.types.clone(),
            original: tape.value(self.original).clone(),
            class_oriented: self.class_oriented.map(|v| tape.value(v).clone()),
            contextual: self.contextual.map(|v| tape.value(v).clone()),
        }
    }
}

fn in_range(span: &EntitySpan, len: usize) -> bool {
    span.end < len
}

fn mean_per_type(
    tape: &mut Tape,
    types: &[String],
    reps: &BTreeMap<&str, Vec<Var>>,
    family: &str,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(types.len());
    for t in types {
        let list = reps
            .get(t.as_str())
            .filter(|l| !l.is_empty())
            .ok_or_else(|| {
                Error::invalid(format!("type {t} has no support mention ({family} prototypes)"))
            })?;
        let stacked = tape.concat_rows(list);
        rows.push(tape.mean_rows(stacked));
    }
    Ok(tape.concat_rows(&rows))
}

/// Averages support representations per type for each requested family.
pub fn build_prototypes(
    tape: &mut Tape,
    enc: &mut impl TokenEncoder,
    support: &[Sentence],
    types: &[String],
    families: Families,
) -> Result<PrototypeVars> {
    if support.is_empty() {
        return Err(Error::invalid("empty support set"));
    }
    let mut original: BTreeMap<&str, Vec<Var>> = BTreeMap::new();
    let mut class_oriented: BTreeMap<&str, Vec<Var>> = BTreeMap::new();
    let mut contextual: BTreeMap<&str, Vec<Var>> = BTreeMap::new();
    for x in support {
        let h = enc.encode_tokens(tape, &x.tokens)?;
        let len = tape.shape(h).0;
        for s in x.spans.iter().filter(|s| in_range(s, len)) {
            if let Some(t) = types.iter().find(|t| **t == s.label) {
                let u = span_rep(tape, h, s.start, s.end)?;
                original.entry(t.as_str()).or_default().push(u);
            }
        }
        if families.class_oriented {
            for t in types {
                if !x.spans.iter().any(|s| s.label == *t && in_range(s, len)) {
                    continue;
                }
                let view = apply_mask(x, &ViewKind::ClassOriented(t.clone()), types)?;
                let hv = enc.encode_tokens(tape, &view.masked_tokens)?;
                for s in x.spans.iter().filter(|s| s.label == *t && in_range(s, len)) {
                    let u = span_rep(tape, hv, s.start, s.end)?;
                    class_oriented.entry(t.as_str()).or_default().push(u);
                }
            }
        }
        if families.contextual {
            let view = apply_mask(x, &ViewKind::Contextual, types)?;
            let hv = enc.encode_tokens(tape, &view.masked_tokens)?;
            let u = contextual_rep(tape, hv)?;
            for t in types {
                if x.spans.iter().any(|s| s.label == *t && in_range(s, len)) {
                    contextual.entry(t.as_str()).or_default().push(u);
                }
            }
        }
    }
    Ok(PrototypeVars {
        types: types.to_vec(),
        original: mean_per_type(tape, types, &original, "original")?,
        class_oriented: families
            .class_oriented
            .then(|| mean_per_type(tape, types, &class_oriented, "class-oriented"))
            .transpose()?,
        contextual: families
            .contextual
            .then(|| mean_per_type(tape, types, &contextual, "contextual"))
            .transpose()?,
    })
}

fn nll(tape: &mut Tape, logits: Var, class: usize) -> Var {
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.pick(logp, &[(0, class)]);
    tape.scale(picked, -1.0)
}

#[derive(Clone, Debug)]
pub struct ClsLoss {
    pub total: Var,
    /// Number of query spans contributing.
    pub spans: usize,
}

/// Sum over query gold spans of the per-view negative log-likelihoods.
pub fn cls_loss(
    tape: &mut Tape,
    enc: &mut impl TokenEncoder,
    query: &[Sentence],
    protos: &PrototypeVars,
) -> Result<ClsLoss> {
    let types = &protos.types;
    let mut terms = Vec::new();
    for x in query {
        if x.spans.is_empty() {
            continue;
        }
        let classes: Vec<usize> = x
            .spans
            .iter()
            .map(|s| {
                types.iter().position(|t| *t == s.label).ok_or_else(|| {
                    Error::invalid(format!("query span label {} is not an episode type", s.label))
                })
            })
            .collect::<Result<_>>()?;
        let h = enc.encode_tokens(tape, &x.tokens)?;
        let len = tape.shape(h).0;
        let live: Vec<(&EntitySpan, usize)> = x
            .spans
            .iter()
            .zip(classes)
            .filter(|(s, _)| in_range(s, len))
            .collect();
        if live.is_empty() {
            continue;
        }
        for (s, y) in &live {
            let u = span_rep(tape, h, s.start, s.end)?;
            let logits = tape.cosine_rows(u, protos.original);
            terms.push(nll(tape, logits, *y));
        }
        if let Some(ctx_protos) = protos.contextual {
            let view = apply_mask(x, &ViewKind::Contextual, types)?;
            let hv = enc.encode_tokens(tape, &view.masked_tokens)?;
            let u = contextual_rep(tape, hv)?;
            let logits = tape.cosine_rows(u, ctx_protos);
            for (_, y) in &live {
                terms.push(nll(tape, logits, *y));
            }
        }
        if let Some(cs_protos) = protos.class_oriented {
            // per-span similarity to each class, each from that class's view
            let mut per_class: Vec<Vec<Var>> = vec![Vec::new(); live.len()];
            for (ti, t) in types.iter().enumerate() {
                let view = apply_mask(x, &ViewKind::ClassOriented(t.clone()), types)?;
                let hv = enc.encode_tokens(tape, &view.masked_tokens)?;
                let c = tape.slice_rows(cs_protos, ti, 1);
                for (k, (s, _)) in live.iter().enumerate() {
                    let u = span_rep(tape, hv, s.start, s.end)?;
                    per_class[k].push(tape.cosine_rows(u, c));
                }
            }
            for (sims, (_, y)) in per_class.iter().zip(&live) {
                let logits = tape.concat_cols(sims);
                terms.push(nll(tape, logits, *y));
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("query set has no gold spans"));
    }
    let stacked = tape.concat_rows(&terms);
    let spans = terms.len();
    Ok(ClsLoss {
        total: tape.sum_all(stacked),
        spans: spans
            / (1 + usize::from(protos.contextual.is_some())
                + usize::from(protos.class_oriented.is_some())),
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `softmax_t cos(u, c_t)` over the rows of `prototypes`.
pub fn classify(u: &[f64], prototypes: &Array2<f64>) -> Result<Vec<f64>> {
    if prototypes.ncols() != u.len() {
        return Err(Error::invalid("representation and prototype widths differ"));
    }
    let nu = norm(u);
    if nu == 0.0 {
        return Err(Error::invalid("zero-norm span representation"));
    }
    let mut sims = Vec::with_capacity(prototypes.nrows());
    for row in prototypes.rows() {
        let c: Vec<f64> = row.to_vec();
        let nc = norm(&c);
        if nc == 0.0 {
            return Err(Error::invalid("zero-norm prototype"));
        }
        sims.push(u.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / (nu * nc));
    }
    let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypedSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub probability: f64,
}

/// Types extracted spans of one sentence against the original prototypes.
pub fn type_spans(
    h: &Array2<f64>,
    spans: &[(usize, usize)],
    prototypes: &PrototypeSet,
) -> Result<Vec<TypedSpan>> {
    let mut out = Vec::with_capacity(spans.len());
    for &(s, e) in spans {
        if s > e || e >= h.nrows() {
            return Err(Error::invalid(format!("span ({s}, {e}) outside sentence")));
        }
        let u: Vec<f64> = h.row(s).iter().zip(h.row(e).iter()).map(|(a, b)| a + b).collect();
        let p = classify(&u, &prototypes.original)?;
        let k = argmax(&p);
        out.push(TypedSpan {
            start: s,
            end: e,
            label: prototypes.types[k].clone(),
            probability: p[k],
        });
    }
    Ok(out)
}
