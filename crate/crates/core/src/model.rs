//! Encoder, MLM head and span scorer sharing one parameter store, plus the
//! on-disk checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;

use msdp_autograd::ndarray::Array2;
use msdp_autograd::{ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{hex_digest, tokenize, Dropout, Encoder, EncoderConfig, MlmHead, Vocabulary};
use crate::error::{Error, Result};
use crate::proto::TokenEncoder;
use crate::seed;
use crate::span::{SpanScorer, DEFAULT_MAX_SPAN_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Span scorer projection width; 0 means hidden_dim / 2.
    pub span_head_dim: usize,
    pub max_span_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            span_head_dim: 0,
            max_span_len: DEFAULT_MAX_SPAN_LEN,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub mlm: MlmHead,
    pub scorer: SpanScorer,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed::derive(seed, "init"));
        let encoder = Encoder::new(config.encoder.clone(), vocab.len(), &mut store, &mut rng)?;
        let mlm = MlmHead::new(&encoder, &mut store, &mut rng);
        let scorer = SpanScorer::new(
            config.encoder.hidden_dim,
            config.span_head_dim,
            &mut store,
            &mut rng,
        );
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            mlm,
            scorer,
        })
    }

    pub fn max_len(&self) -> usize {
        self.config.encoder.max_len
    }

    /// Sentence rows (special tokens dropped) on a tape.
    pub fn sentence_rows(
        &self,
        tape: &mut Tape,
        tokens: &[String],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let t = tokenize(tokens, &self.vocab, self.max_len());
        let h = self.encoder.forward(tape, &self.store, &t.ids, dropout)?;
        Ok(tape.slice_rows(h, 1, t.kept()))
    }

    /// Evaluation-mode sentence rows.
    pub fn encode_sentence(&self, tokens: &[String]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let h = self.sentence_rows(&mut tape, tokens, &mut Dropout::off())?;
        Ok(tape.value(h).clone())
    }

    /// A [`TokenEncoder`] view, with dropout when `rng` is given.
    pub fn token_encoder<'a>(&'a self, rng: Option<&'a mut ChaCha8Rng>) -> ModelEncoder<'a> {
        let dropout = match rng {
            Some(r) => Dropout::train(self.config.encoder.dropout, r),
            None => Dropout::off(),
        };
        ModelEncoder {
            model: self,
            dropout,
        }
    }
}

pub struct ModelEncoder<'a> {
    model: &'a Model,
    dropout: Dropout<'a>,
}

impl TokenEncoder for ModelEncoder<'_> {
    fn encode_tokens(&mut self, tape: &mut Tape, tokens: &[String]) -> Result<Var> {
        self.model.sentence_rows(tape, tokens, &mut self.dropout)
    }
}

/// Per-step losses; `None` where a term was not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_mlm: Option<f64>,
    pub l_scl: Option<f64>,
    pub l_span: Option<f64>,
    pub l_cls: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config: ModelConfig,
    pub config_sha256: String,
    pub vocab_hash: String,
    pub params_sha256: String,
    pub params: Vec<(String, [usize; 2])>,
    pub step: usize,
    pub seed: u64,
    pub loss_history: Vec<LossRecord>,
}

const FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const VOCAB: &str = "vocab.txt";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn config_digest(config: &ModelConfig) -> Result<String> {
    Ok(hex_digest(&serde_json::to_vec(config)?))
}

/// A model plus its training provenance.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
    pub seed: u64,
    pub loss_history: Vec<LossRecord>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let flat = self.model.store.flatten();
        let mut blob = Vec::with_capacity(flat.len() * 8);
        for v in &flat {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let manifest = CheckpointManifest {
            format: FORMAT,
            config: self.model.config.clone(),
            config_sha256: config_digest(&self.model.config)?,
            vocab_hash: self.model.vocab.hash(),
            params_sha256: hex_digest(&blob),
            params: self
                .model
                .store
                .iter()
                .map(|(_, name, a)| (name.to_owned(), [a.nrows(), a.ncols()]))
                .collect(),
            step: self.step,
            seed: self.seed,
            loss_history: self.loss_history.clone(),
        };
        write_atomic(&dir.join(PARAMS), &blob)?;
        write_atomic(&dir.join(VOCAB), self.model.vocab.to_text().as_bytes())?;
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&dir.join(MANIFEST), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let manifest: CheckpointManifest = serde_json::from_slice(&read(MANIFEST)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                manifest.format
            )));
        }
        if config_digest(&manifest.config)? != manifest.config_sha256 {
            return Err(Error::Checkpoint("configuration hash mismatch".into()));
        }
        let vocab_text = String::from_utf8(read(VOCAB)?)
            .map_err(|_| Error::Checkpoint("vocabulary is not UTF-8".into()))?;
        let vocab = Vocabulary::from_text(&vocab_text)?;
        if vocab.hash() != manifest.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let blob = read(PARAMS)?;
        if hex_digest(&blob) != manifest.params_sha256 {
            return Err(Error::Checkpoint("parameter blob hash mismatch".into()));
        }
        if blob.len() % 8 != 0 {
            return Err(Error::Checkpoint("parameter blob is not a whole number of f64".into()));
        }
        let flat: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut model = Model::new(manifest.config.clone(), vocab, manifest.seed)?;
        let expected: Vec<(String, [usize; 2])> = model
            .store
            .iter()
            .map(|(_, name, a)| (name.to_owned(), [a.nrows(), a.ncols()]))
            .collect();
        if expected != manifest.params {
            return Err(Error::Checkpoint(
                "parameter layout does not match the model configuration".into(),
            ));
        }
        if !model.store.load_flat(&flat) {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        Ok(Self {
            model,
            step: manifest.step,
            seed: manifest.seed,
            loss_history: manifest.loss_history,
        })
    }
}

/// Writes `step,l_mlm,l_scl,l_span,l_cls` rows; missing terms stay empty.
pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,l_mlm,l_scl,l_span,l_cls\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            cell(r.l_mlm),
            cell(r.l_scl),
            cell(r.l_span),
            cell(r.l_cls)
        ));
    }
    out
}
