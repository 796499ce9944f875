//! Exact-match span metrics, extractor precision/recall, false-positive
//! breakdown, and ablation runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_entity_index, Sentence};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, LossRecord, Model, ModelConfig};
use crate::proto::Families;
use crate::train::{
    build_vocabulary, infer, run_episode_training, run_pretraining, EpisodeTrainConfig,
    PretrainConfig, SentencePrediction,
};

/// A typed span `(start, end, label)`.
pub type Typed = (usize, usize, String);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    pub fn metrics(self) -> EpisodeMetrics {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EpisodeMetrics {
            counts: self,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_aligned<A, B>(preds: &[A], golds: &[B]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predicted sentences for {} gold sentences",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

fn count_set<T: Ord + Clone>(pred: &[T], gold: &[T]) -> Counts {
    let p: BTreeSet<T> = pred.iter().cloned().collect();
    let g: BTreeSet<T> = gold.iter().cloned().collect();
    let tp = p.intersection(&g).count();
    Counts {
        tp,
        fp: p.len() - tp,
        fn_: g.len() - tp,
    }
}

/// Exact `(start, end, type)` matching, pooled over aligned sentences.
/// Duplicate predictions count once.
pub fn span_counts(preds: &[Vec<Typed>], golds: &[Vec<Typed>]) -> Result<Counts> {
    check_aligned(preds, golds)?;
    Ok(preds
        .iter()
        .zip(golds)
        .map(|(p, g)| count_set(p, g))
        .fold(Counts::default(), Counts::add))
}

pub fn episode_f1(preds: &[Vec<Typed>], golds: &[Vec<Typed>]) -> Result<EpisodeMetrics> {
    Ok(span_counts(preds, golds)?.metrics())
}

/// Boundary-only precision and recall.
pub fn extractor_pr(preds: &[Vec<(usize, usize)>], golds: &[Vec<(usize, usize)>]) -> Result<(f64, f64)> {
    check_aligned(preds, golds)?;
    let c = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| count_set(p, g))
        .fold(Counts::default(), Counts::add)
        .metrics();
    Ok((c.precision, c.recall))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub fp_type: usize,
    pub fp_span: usize,
    pub fn_: usize,
    pub predictions: usize,
}

impl ErrorBreakdown {
    fn rate(&self, n: usize) -> f64 {
        if self.predictions == 0 {
            0.0
        } else {
            n as f64 / self.predictions as f64
        }
    }

    pub fn fp_type_rate(&self) -> f64 {
        self.rate(self.fp_type)
    }

    pub fn fp_span_rate(&self) -> f64 {
        self.rate(self.fp_span)
    }

    pub fn add(self, o: ErrorBreakdown) -> ErrorBreakdown {
        ErrorBreakdown {
            fp_type: self.fp_type + o.fp_type,
            fp_span: self.fp_span + o.fp_span,
            fn_: self.fn_ + o.fn_,
            predictions: self.predictions + o.predictions,
        }
    }
}

/// False positives split into right-boundary/wrong-type and the rest.
pub fn error_analysis(preds: &[Vec<Typed>], golds: &[Vec<Typed>]) -> Result<ErrorBreakdown> {
    check_aligned(preds, golds)?;
    let mut out = ErrorBreakdown::default();
    for (p, g) in preds.iter().zip(golds) {
        let p: BTreeSet<&Typed> = p.iter().collect();
        let g: BTreeSet<&Typed> = g.iter().collect();
        let boundaries: BTreeSet<(usize, usize)> = g.iter().map(|(s, e, _)| (*s, *e)).collect();
        out.predictions += p.len();
        for pred in &p {
            if g.contains(pred) {
                continue;
            }
            if boundaries.contains(&(pred.0, pred.1)) {
                out.fp_type += 1;
            } else {
                out.fp_span += 1;
            }
        }
        out.fn_ += g.iter().filter(|x| !p.contains(*x)).count();
    }
    Ok(out)
}

pub fn gold_typed(x: &Sentence) -> Vec<Typed> {
    x.spans.iter().map(|s| (s.start, s.end, s.label.clone())).collect()
}

pub fn predicted_typed(p: &SentencePrediction) -> Vec<Typed> {
    p.typed.iter().map(|t| (t.start, t.end, t.label.clone())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean_f1: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorPr {
    pub p: f64,
    pub r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub fp_type_rate: f64,
    pub fp_span_rate: f64,
}

/// The metrics file written by evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub micro: Prf,
    pub per_episode: MeanStd,
    pub extractor: ExtractorPr,
    pub errors: ErrorRates,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores per-episode predictions against query gold spans.
pub fn evaluate_predictions(
    episodes: &[Episode],
    predictions: &[Vec<SentencePrediction>],
    variant: &str,
    seed: u64,
) -> Result<MetricsReport> {
    check_aligned(predictions, episodes)?;
    let mut micro = Counts::default();
    let mut extractor = Counts::default();
    let mut errors = ErrorBreakdown::default();
    let mut per_episode = Vec::with_capacity(episodes.len());
    for (ep, preds) in episodes.iter().zip(predictions) {
        let golds: Vec<Vec<Typed>> = ep.query.iter().map(gold_typed).collect();
        let typed: Vec<Vec<Typed>> = preds.iter().map(predicted_typed).collect();
        let c = span_counts(&typed, &golds)?;
        per_episode.push(c.metrics().f1);
        micro = micro.add(c);
        errors = errors.add(error_analysis(&typed, &golds)?);
        let gold_b: Vec<Vec<(usize, usize)>> = golds
            .iter()
            .map(|g| g.iter().map(|(s, e, _)| (*s, *e)).collect())
            .collect();
        let pred_b: Vec<Vec<(usize, usize)>> = preds
            .iter()
            .map(|p| p.extracted.iter().map(|s| (s.start, s.end)).collect())
            .collect();
        check_aligned(&pred_b, &gold_b)?;
        for (p, g) in pred_b.iter().zip(&gold_b) {
            extractor = extractor.add(count_set(p, g));
        }
    }
    let m = micro.metrics();
    let x = extractor.metrics();
    let (mean_f1, std) = mean_std(&per_episode);
    Ok(MetricsReport {
        variant: variant.to_owned(),
        seed,
        micro: Prf {
            p: m.precision,
            r: m.recall,
            f1: m.f1,
        },
        per_episode: MeanStd { mean_f1, std },
        extractor: ExtractorPr {
            p: x.precision,
            r: x.recall,
        },
        errors: ErrorRates {
            fp_type_rate: errors.fp_type_rate(),
            fp_span_rate: errors.fp_span_rate(),
        },
    })
}

pub fn evaluate(model: &Model, episodes: &[Episode], variant: &str, seed: u64) -> Result<(MetricsReport, Vec<Vec<SentencePrediction>>)> {
    evaluate_with_workers(model, episodes, variant, seed, 1)
}

/// Like [`evaluate`], spreading episodes over `workers` threads. Inference
/// is read-only, so the output does not depend on the worker count.
pub fn evaluate_with_workers(
    model: &Model,
    episodes: &[Episode],
    variant: &str,
    seed: u64,
    workers: usize,
) -> Result<(MetricsReport, Vec<Vec<SentencePrediction>>)> {
    let predictions = if workers <= 1 || episodes.len() < 2 {
        episodes.iter().map(|ep| infer(model, ep)).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = episodes.len().div_ceil(workers);
        let parts: Vec<Result<Vec<Vec<SentencePrediction>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = episodes
                .chunks(chunk)
                .map(|eps| scope.spawn(move || eps.iter().map(|ep| infer(model, ep)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(episodes.len());
        for part in parts {
            all.extend(part?);
        }
        all
    };
    let report = evaluate_predictions(episodes, &predictions, variant, seed)?;
    Ok((report, predictions))
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub episode_id: usize,
    pub sentence: usize,
    pub tokens: Vec<String>,
    pub gold: Vec<Typed>,
    pub predicted: Vec<PredictedSpan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub score: f64,
    pub probability: f64,
}

pub fn prediction_records(
    episodes: &[Episode],
    predictions: &[Vec<SentencePrediction>],
) -> Vec<PredictionRecord> {
    let mut out = Vec::new();
    for (e, (ep, preds)) in episodes.iter().zip(predictions).enumerate() {
        for (i, (x, p)) in ep.query.iter().zip(preds).enumerate() {
            out.push(PredictionRecord {
                episode_id: e,
                sentence: i,
                tokens: x.tokens.clone(),
                gold: gold_typed(x),
                predicted: p
                    .typed
                    .iter()
                    .zip(&p.extracted)
                    .map(|(t, s)| PredictedSpan {
                        start: t.start,
                        end: t.end,
                        label: t.label.clone(),
                        score: s.score,
                        probability: t.probability,
                    })
                    .collect(),
            });
        }
    }
    out
}

/// One line of the representation dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationRecord {
    pub episode_id: usize,
    pub set: String,
    pub sentence: usize,
    pub span: (usize, usize),
    pub gold_type: String,
    pub view: String,
    pub vector: Vec<f64>,
}

/// Evaluation-mode span representations of every gold span under the
/// original, contextual and own-class class-oriented views.
pub fn representation_records(model: &Model, episodes: &[Episode]) -> Result<Vec<RepresentationRecord>> {
    use crate::proto::{apply_mask, ViewKind};
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for (set, sentences) in [("support", &ep.support), ("query", &ep.query)] {
            for (i, x) in sentences.iter().enumerate() {
                let h = model.encode_sentence(&x.tokens)?;
                let ctx_view = apply_mask(x, &ViewKind::Contextual, &ep.types)?;
                let ctx = model.encode_sentence(&ctx_view.masked_tokens)?;
                let ctx_vec: Vec<f64> = if ctx.nrows() == 0 {
                    Vec::new()
                } else {
                    ctx.mean_axis(msdp_autograd::ndarray::Axis(0)).expect("rows").to_vec()
                };
                for s in x.spans.iter().filter(|s| s.end < h.nrows()) {
                    let span_sum = |m: &msdp_autograd::ndarray::Array2<f64>| -> Vec<f64> {
                        m.row(s.start).iter().zip(m.row(s.end).iter()).map(|(a, b)| a + b).collect()
                    };
                    let mut push = |view: String, vector: Vec<f64>| {
                        out.push(RepresentationRecord {
                            episode_id: e,
                            set: set.to_owned(),
                            sentence: i,
                            span: (s.start, s.end),
                            gold_type: s.label.clone(),
                            view,
                            vector,
                        })
                    };
                    push(ViewKind::Original.name(), span_sum(&h));
                    push(ViewKind::Contextual.name(), ctx_vec.clone());
                    if ep.types.contains(&s.label) {
                        let kind = ViewKind::ClassOriented(s.label.clone());
                        let view = apply_mask(x, &kind, &ep.types)?;
                        let hc = model.encode_sentence(&view.masked_tokens)?;
                        push(kind.name(), span_sum(&hc));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Model variants for ablation; each differs from `Full` in one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoDemoMlm,
    NoContrastive,
    NoClassOrientedProto,
    NoContextualProto,
    NoPretrain,
    Base,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoDemoMlm,
        Variant::NoContrastive,
        Variant::NoClassOrientedProto,
        Variant::NoContextualProto,
        Variant::NoPretrain,
        Variant::Base,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDemoMlm => "no_demo_mlm",
            Variant::NoContrastive => "no_contrastive",
            Variant::NoClassOrientedProto => "no_class_oriented_proto",
            Variant::NoContextualProto => "no_contextual_proto",
            Variant::NoPretrain => "no_pretrain",
            Variant::Base => "base",
        }
    }

    /// Pre-training weight α, or `None` to skip pre-training.
    pub fn pretrain_alpha(self, alpha: f64) -> Option<f64> {
        match self {
            Variant::NoPretrain | Variant::Base => None,
            Variant::NoDemoMlm => Some(0.0),
            Variant::NoContrastive => Some(1.0),
            _ => Some(alpha),
        }
    }

    pub fn families(self) -> Families {
        match self {
            Variant::Base => Families::ORIGINAL_ONLY,
            Variant::NoClassOrientedProto => Families {
                class_oriented: false,
                contextual: true,
            },
            Variant::NoContextualProto => Families {
                class_oriented: true,
                contextual: false,
            },
            _ => Families::ALL,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Everything one benchmark run needs besides data and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: EpisodeTrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies `section.field=value` overrides. Values
    /// are read as TOML literals, falling back to bare strings. Schema errors
    /// name the offending field path.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_owned()))?;
        for (key, raw) in overrides {
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| {
                Error::Config(format!("override key `{key}` is empty"))
            })?;
            let mut node = &mut table;
            for part in parts {
                let entry = node
                    .entry(part.to_owned())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                node = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: `{part}` is not a section")))?;
            }
            node.insert(leaf.to_owned(), value);
        }
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner().to_string().trim_end()))
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        if self.model.max_span_len == 0 {
            return Err(Error::Config("model.max_span_len must be positive".into()));
        }
        self.pretrain.validate()?;
        self.train.validate()
    }
}

/// Data for an ablation: the training split (for vocabulary and
/// pre-training) and train/test episodes drawn from their splits.
pub struct Benchmark<'a> {
    pub train_corpus: &'a [Sentence],
    pub train_episodes: &'a [Episode],
    pub test_episodes: &'a [Episode],
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub checkpoint: Checkpoint,
}

/// Pre-trains (when `alpha` is set) a fresh model for `seed`.
pub fn pretrained_model(
    bench: &Benchmark,
    config: &RunConfig,
    alpha: Option<f64>,
    seed: u64,
) -> Result<(Model, Vec<LossRecord>)> {
    let vocab = build_vocabulary(bench.train_corpus);
    let mut model = Model::new(config.model.clone(), vocab, seed)?;
    let mut history = Vec::new();
    if let Some(alpha) = alpha {
        let pc = PretrainConfig {
            alpha,
            seed: crate::seed::derive(seed, "pretrain"),
            ..config.pretrain.clone()
        };
        let index = build_entity_index(bench.train_corpus);
        history = run_pretraining(&mut model, bench.train_corpus, &index, &pc)?;
    }
    Ok((model, history))
}

/// Episodic training of `model` under `variant`, then test evaluation.
pub fn train_and_evaluate(
    bench: &Benchmark,
    config: &RunConfig,
    variant: Variant,
    mut model: Model,
    mut history: Vec<LossRecord>,
    seed: u64,
) -> Result<RunOutcome> {
    let tc = EpisodeTrainConfig {
        families: variant.families(),
        seed: crate::seed::derive(seed, "train"),
        ..config.train.clone()
    };
    let offset = history.len();
    let train_history = run_episode_training(&mut model, bench.train_episodes, &tc, |_, _| Ok(()))?;
    history.extend(train_history.into_iter().map(|mut r| {
        r.step += offset;
        r
    }));
    let (report, _) = evaluate(&model, bench.test_episodes, variant.name(), seed)?;
    Ok(RunOutcome {
        report,
        checkpoint: Checkpoint {
            step: history.len(),
            model,
            seed,
            loss_history: history,
        },
    })
}

pub fn run_variant(bench: &Benchmark, config: &RunConfig, variant: Variant, seed: u64) -> Result<RunOutcome> {
    let (model, history) =
        pretrained_model(bench, config, variant.pretrain_alpha(config.pretrain.alpha), seed)?;
    train_and_evaluate(bench, config, variant, model, history, seed)
}

/// Runs every variant for every seed, sharing identical pre-training runs.
pub fn run_ablation(
    bench: &Benchmark,
    config: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&MetricsReport),
) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for &seed in seeds {
        let mut cache: BTreeMap<Option<u64>, (Model, Vec<LossRecord>)> = BTreeMap::new();
        for &v in variants {
            let alpha = v.pretrain_alpha(config.pretrain.alpha);
            let key = alpha.map(f64::to_bits);
            if !cache.contains_key(&key) {
                cache.insert(key, pretrained_model(bench, config, alpha, seed)?);
            }
            let (model, history) = cache[&key].clone();
            let out = train_and_evaluate(bench, config, v, model, history, seed)?;
            progress(&out.report);
            reports.push(out.report);
        }
    }
    Ok(reports)
}

/// `variant,seeds,micro_f1_mean,micro_f1_std,...` rows, one per variant.
pub fn comparison_csv(reports: &[MetricsReport]) -> String {
    let mut by_variant: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !by_variant.contains_key(r.variant.as_str()) {
            order.push(&r.variant);
        }
        by_variant.entry(&r.variant).or_default().push(r);
    }
    let mut out = String::from(
        "variant,seeds,micro_f1_mean,micro_f1_std,episode_f1_mean,extractor_p_mean,extractor_r_mean,fp_type_rate_mean,fp_span_rate_mean\n",
    );
    for v in order {
        let rs = &by_variant[v];
        let col = |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (f1, f1_std) = col(&|r| r.micro.f1);
        out.push_str(&format!(
            "{v},{},{f1:.6},{f1_std:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            rs.len(),
            col(&|r| r.per_episode.mean_f1).0,
            col(&|r| r.extractor.p).0,
            col(&|r| r.extractor.r).0,
            col(&|r| r.errors.fp_type_rate).0,
            col(&|r| r.errors.fp_span_rate).0,
        ));
    }
    out
}
