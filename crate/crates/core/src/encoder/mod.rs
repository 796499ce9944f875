//! Tokenizer and a small pre-LN transformer encoder with a tied MLM head.

mod vocab;

use msdp_autograd::ndarray::Array2;
use msdp_autograd::{ParamId, ParamStore, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use vocab::{
    normalize, tokenize, Tokenized, Vocabulary, CLS, CLS_ID, MASK, MASK_ID, PAD, PAD_ID, SEP,
    SEP_ID, UNK, UNK_ID,
};
pub(crate) use vocab::hex_digest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Feed-forward width; 0 means 4 × hidden_dim.
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 128,
            heads: 4,
            max_len: 64,
            dropout: 0.1,
            ffn_dim: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn ffn(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.hidden_dim
        } else {
            self.ffn_dim
        }
    }
}

/// Dropout state for one forward pass; `off()` gives evaluation mode.
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.p > 0.0 && self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let p = self.p;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Array2::from_shape_fn(tape.shape(x), |_| {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

/// Per-position hidden vectors from an evaluation-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates(pub Array2<f64>);

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of the encoder; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    vocab_size: usize,
    pub(crate) token_embedding: ParamId,
    position_embedding: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<Layer>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
}

pub(crate) fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub(crate) const INIT_STD: f64 = 0.02;

impl Encoder {
    pub fn new(
        config: EncoderConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn();
        let ones = || Array2::ones((1, d));
        let zeros = |n: usize| Array2::zeros((1, n));
        let token_embedding = store.add("embeddings.token", normal(vocab_size, d, INIT_STD, rng));
        let position_embedding =
            store.add("embeddings.position", normal(config.max_len, d, INIT_STD, rng));
        let emb_ln_g = store.add("embeddings.ln.gamma", ones());
        let emb_ln_b = store.add("embeddings.ln.beta", zeros(d));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = |s: &str| format!("layer{l}.{s}");
            layers.push(Layer {
                ln1_g: store.add(name("ln1.gamma"), ones()),
                ln1_b: store.add(name("ln1.beta"), zeros(d)),
                wq: store.add(name("attn.wq"), normal(d, d, INIT_STD, rng)),
                bq: store.add(name("attn.bq"), zeros(d)),
                wk: store.add(name("attn.wk"), normal(d, d, INIT_STD, rng)),
                bk: store.add(name("attn.bk"), zeros(d)),
                wv: store.add(name("attn.wv"), normal(d, d, INIT_STD, rng)),
                bv: store.add(name("attn.bv"), zeros(d)),
                wo: store.add(name("attn.wo"), normal(d, d, INIT_STD, rng)),
                bo: store.add(name("attn.bo"), zeros(d)),
                ln2_g: store.add(name("ln2.gamma"), ones()),
                ln2_b: store.add(name("ln2.beta"), zeros(d)),
                w1: store.add(name("ffn.w1"), normal(d, f, INIT_STD, rng)),
                b1: store.add(name("ffn.b1"), zeros(f)),
                w2: store.add(name("ffn.w2"), normal(f, d, INIT_STD, rng)),
                b2: store.add(name("ffn.b2"), zeros(d)),
            });
        }
        let final_ln_g = store.add("final_ln.gamma", ones());
        let final_ln_b = store.add("final_ln.beta", zeros(d));
        Ok(Self {
            config,
            vocab_size,
            token_embedding,
            position_embedding,
            emb_ln_g,
            emb_ln_b,
            layers,
            final_ln_g,
            final_ln_b,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Hidden states for `ids` as a `len × hidden_dim` tape node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("empty input sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(bad) = ids.iter().find(|i| **i >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        let n = ids.len();
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let tok_table = tape.param(store, self.token_embedding);
        let pos_table = tape.param(store, self.position_embedding);
        let tok = tape.gather(tok_table, ids);
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(pos_table, &positions);
        let emb = tape.add(tok, pos);
        let (g, b) = (tape.param(store, self.emb_ln_g), tape.param(store, self.emb_ln_b));
        let emb = tape.layer_norm(emb, g, b);
        let mut x = dropout.apply(tape, emb);

        let key_mask = if ids.contains(&PAD_ID) {
            Some(Array2::from_shape_fn((n, n), |(_, j)| {
                if ids[j] == PAD_ID {
                    -1e9
                } else {
                    0.0
                }
            }))
        } else {
            None
        };

        for layer in &self.layers {
            let p = |tape: &mut Tape, id| tape.param(store, id);
            let (g1, b1) = (p(tape, layer.ln1_g), p(tape, layer.ln1_b));
            let normed = tape.layer_norm(x, g1, b1);
            let (wq, bq) = (p(tape, layer.wq), p(tape, layer.bq));
            let (wk, bk) = (p(tape, layer.wk), p(tape, layer.bk));
            let (wv, bv) = (p(tape, layer.wv), p(tape, layer.bv));
            let q = tape.linear(normed, wq, bq);
            let k = tape.linear(normed, wk, bk);
            let v = tape.linear(normed, wv, bv);
            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let scores = tape.matmul_t(qh, kh);
                let mut scores = tape.scale(scores, scale);
                if let Some(mask) = &key_mask {
                    scores = tape.add_const(scores, mask);
                }
                let attn = tape.softmax_rows(scores);
                let attn = dropout.apply(tape, attn);
                head_outputs.push(tape.matmul(attn, vh));
            }
            let merged = if heads == 1 {
                head_outputs[0]
            } else {
                tape.concat_cols(&head_outputs)
            };
            let (wo, bo) = (p(tape, layer.wo), p(tape, layer.bo));
            let attn_out = tape.linear(merged, wo, bo);
            let attn_out = dropout.apply(tape, attn_out);
            x = tape.add(x, attn_out);

            let (g2, b2) = (p(tape, layer.ln2_g), p(tape, layer.ln2_b));
            let normed = tape.layer_norm(x, g2, b2);
            let (w1, fb1) = (p(tape, layer.w1), p(tape, layer.b1));
            let (w2, fb2) = (p(tape, layer.w2), p(tape, layer.b2));
            let hidden = tape.linear(normed, w1, fb1);
            let hidden = tape.gelu(hidden);
            let ffn_out = tape.linear(hidden, w2, fb2);
            let ffn_out = dropout.apply(tape, ffn_out);
            x = tape.add(x, ffn_out);
        }
        let (g, b) = (
            tape.param(store, self.final_ln_g),
            tape.param(store, self.final_ln_b),
        );
        Ok(tape.layer_norm(x, g, b))
    }

    /// Evaluation-mode forward pass (dropout off).
    pub fn encode(&self, store: &ParamStore, ids: &[usize]) -> Result<HiddenStates> {
        let mut tape = Tape::new();
        let h = self.forward(&mut tape, store, ids, &mut Dropout::off())?;
        Ok(HiddenStates(tape.value(h).clone()))
    }
}

/// Sequence representation: the first (`[CLS]`) row.
pub fn pool(tape: &mut Tape, hidden: Var) -> Result<Var> {
    if tape.shape(hidden).0 == 0 {
        return Err(Error::invalid("cannot pool an empty sequence"));
    }
    Ok(tape.slice_rows(hidden, 0, 1))
}

pub fn pool_states(hidden: &HiddenStates) -> Result<Vec<f64>> {
    if hidden.is_empty() {
        return Err(Error::invalid("cannot pool an empty sequence"));
    }
    Ok(hidden.0.row(0).to_vec())
}

/// MLM head: dense + GELU + layer norm, then logits against the (tied)
/// token embedding matrix plus an output bias.
#[derive(Clone, Debug)]
pub struct MlmHead {
    dense_w: ParamId,
    dense_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    out_bias: ParamId,
    token_embedding: ParamId,
}

impl MlmHead {
    pub fn new(encoder: &Encoder, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = encoder.config.hidden_dim;
        Self {
            dense_w: store.add("mlm.dense.w", normal(d, d, INIT_STD, rng)),
            dense_b: store.add("mlm.dense.b", Array2::zeros((1, d))),
            ln_g: store.add("mlm.ln.gamma", Array2::ones((1, d))),
            ln_b: store.add("mlm.ln.beta", Array2::zeros((1, d))),
            out_bias: store.add("mlm.out_bias", Array2::zeros((1, encoder.vocab_size))),
            token_embedding: encoder.token_embedding,
        }
    }

    /// Unnormalized vocabulary scores for the selected positions.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hidden: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let len = tape.shape(hidden).0;
        if let Some(p) = positions.iter().find(|p| **p >= len) {
            return Err(Error::invalid(format!("position {p} out of range for length {len}")));
        }
        let rows = tape.gather(hidden, positions);
        let (w, b) = (tape.param(store, self.dense_w), tape.param(store, self.dense_b));
        let x = tape.linear(rows, w, b);
        let x = tape.gelu(x);
        let (g, beta) = (tape.param(store, self.ln_g), tape.param(store, self.ln_b));
        let x = tape.layer_norm(x, g, beta);
        let emb = tape.param(store, self.token_embedding);
        let logits = tape.matmul_t(x, emb);
        let bias = tape.param(store, self.out_bias);
        Ok(tape.add_row(logits, bias))
    }

    /// Per-position probability distributions over the vocabulary.
    pub fn probabilities(
        &self,
        store: &ParamStore,
        hidden: &HiddenStates,
        positions: &[usize],
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let h = tape.leaf(hidden.0.clone());
        let logits = self.logits(&mut tape, store, h, positions)?;
        let probs = tape.softmax_rows(logits);
        Ok(tape.value(probs).clone())
    }
}
