//! Span boundary scoring, the span cross-entropy, and span decoding.

use std::collections::BTreeSet;

use msdp_autograd::ndarray::Array2;
use msdp_autograd::{ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{normal, HiddenStates, INIT_STD};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_SPAN_LEN: usize = 8;

/// Candidate cells `(i, j)` with `i ≤ j` and `j − i < max_span_len`, row-major.
pub fn candidate_cells(len: usize, max_span_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..len {
        for j in i..len.min(i + max_span_len) {
            out.push((i, j));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanScorer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub hidden_dim: usize,
    pub head_dim: usize,
}

impl SpanScorer {
    /// `head_dim = 0` picks `hidden_dim / 2`.
    pub fn new(
        hidden_dim: usize,
        head_dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let head_dim = if head_dim == 0 { (hidden_dim / 2).max(1) } else { head_dim };
        let mut init = |r: usize, c: usize| normal(r, c, INIT_STD, rng);
        Self {
            wq: store.add("span.wq", init(hidden_dim, head_dim)),
            wk: store.add("span.wk", init(hidden_dim, head_dim)),
            bq: store.add("span.bq", Array2::zeros((1, head_dim))),
            bk: store.add("span.bk", Array2::zeros((1, head_dim))),
            wv: store.add("span.wv", init(hidden_dim, 1)),
            hidden_dim,
            head_dim,
        }
    }

    /// Full `L×L` score matrix on the tape; `h` holds sentence rows only.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let (len, dim) = tape.shape(h);
        if dim != self.hidden_dim {
            return Err(Error::invalid(format!(
                "hidden width {dim} does not match scorer width {}",
                self.hidden_dim
            )));
        }
        if len == 0 {
            return Err(Error::invalid("no sentence positions to score"));
        }
        let (wq, bq) = (tape.param(store, self.wq), tape.param(store, self.bq));
        let (wk, bk) = (tape.param(store, self.wk), tape.param(store, self.bk));
        let wv = tape.param(store, self.wv);
        let q = tape.linear(h, wq, bq);
        let k = tape.linear(h, wk, bk);
        let qk = tape.matmul_t(q, k);
        let v = tape.matmul(h, wv); // L×1
        let ones = tape.leaf(Array2::ones((1, len)));
        let vi = tape.matmul(v, ones);
        let vj = tape.transpose(vi);
        let unary = tape.add(vi, vj);
        Ok(tape.add(qk, unary))
    }
}

/// Scores over the candidate cells of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanScoreMatrix {
    pub max_span_len: usize,
    /// Dense `L×L`; only candidate cells are meaningful.
    pub values: Array2<f64>,
}

impl SpanScoreMatrix {
    pub fn new(values: Array2<f64>, max_span_len: usize) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::invalid("span score matrix must be square"));
        }
        Ok(Self {
            max_span_len,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cells(&self) -> Vec<(usize, usize)> {
        candidate_cells(self.len(), self.max_span_len)
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i <= j && j < self.len() && j - i < self.max_span_len).then(|| self.values[[i, j]])
    }
}

/// Gold indicator Ω over candidate cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanLabelMatrix {
    pub len: usize,
    pub max_span_len: usize,
    pub gold: BTreeSet<(usize, usize)>,
}

impl SpanLabelMatrix {
    pub fn new(
        len: usize,
        max_span_len: usize,
        gold: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let gold: BTreeSet<(usize, usize)> = gold.into_iter().collect();
        for &(i, j) in &gold {
            if i > j || j >= len || j - i >= max_span_len {
                return Err(Error::invalid(format!(
                    "gold span ({i}, {j}) is not a candidate cell for length {len}"
                )));
            }
        }
        Ok(Self {
            len,
            max_span_len,
            gold,
        })
    }

    /// Like `new`, but silently leaves out spans that are not candidate
    /// cells (too long or cut by truncation). Returns the number dropped.
    pub fn lenient(
        len: usize,
        max_span_len: usize,
        gold: impl IntoIterator<Item = (usize, usize)>,
    ) -> (Self, usize) {
        let mut dropped = 0;
        let kept: Vec<(usize, usize)> = gold
            .into_iter()
            .filter(|&(i, j)| {
                let ok = i <= j && j < len && j - i < max_span_len;
                dropped += usize::from(!ok);
                ok
            })
            .collect();
        let m = Self::new(len, max_span_len, kept).expect("filtered to candidates");
        (m, dropped)
    }

    pub fn is_gold(&self, i: usize, j: usize) -> bool {
        self.gold.contains(&(i, j))
    }
}

/// `log(1 + Σ exp(±f))` on the tape, negated on gold cells.
pub fn span_loss_var(tape: &mut Tape, scores: Var, omega: &SpanLabelMatrix) -> Result<Var> {
    let (rows, cols) = tape.shape(scores);
    if rows != omega.len || cols != omega.len {
        return Err(Error::invalid(format!(
            "score matrix {rows}x{cols} does not match label length {}",
            omega.len
        )));
    }
    let cells = candidate_cells(omega.len, omega.max_span_len);
    if cells.is_empty() {
        return Err(Error::invalid("no candidate span cells"));
    }
    let signs = Array2::from_shape_fn((cells.len(), 1), |(r, _)| {
        let (i, j) = cells[r];
        if omega.is_gold(i, j) {
            -1.0
        } else {
            1.0
        }
    });
    let picked = tape.pick(scores, &cells);
    let signed = tape.mul_const(picked, signs);
    Ok(tape.log_one_plus_sum_exp(signed))
}

pub fn span_loss(f: &SpanScoreMatrix, omega: &SpanLabelMatrix) -> Result<f64> {
    if f.max_span_len != omega.max_span_len {
        return Err(Error::invalid("score and label matrices use different span limits"));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(f.values.clone());
    let loss = span_loss_var(&mut tape, v, omega)?;
    Ok(tape.scalar(loss))
}

/// Evaluates the scorer without recording gradients.
pub fn score_spans(
    h: &HiddenStates,
    scorer: &SpanScorer,
    store: &ParamStore,
    max_span_len: usize,
) -> Result<SpanScoreMatrix> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.0.clone());
    let f = scorer.scores(&mut tape, store, hv)?;
    SpanScoreMatrix::new(tape.value(f).clone(), max_span_len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl ScoredSpan {
    pub fn overlaps(&self, other: &ScoredSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Cells scoring above `threshold`, best first. With `flat`, a span is kept
/// only if it overlaps no higher-scored kept span.
pub fn decode_spans(f: &SpanScoreMatrix, threshold: f64, flat: bool) -> Vec<ScoredSpan> {
    let mut found: Vec<ScoredSpan> = f
        .cells()
        .into_iter()
        .map(|(i, j)| ScoredSpan {
            start: i,
            end: j,
            score: f.values[[i, j]],
        })
        .filter(|s| s.score > threshold)
        .collect();
    found.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    if !flat {
        return found;
    }
    let mut kept: Vec<ScoredSpan> = Vec::new();
    for s in found {
        if kept.iter().all(|k| !k.overlaps(&s)) {
            kept.push(s);
        }
    }
    kept
}
