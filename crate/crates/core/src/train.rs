//! Optimizer, learning-rate schedule, the pre-training loop, episodic
//! training and inference.

use msdp_autograd::{GradBuffer, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_set, EntityIndex, Sentence};
use crate::encoder::{pool, Dropout, Vocabulary};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{LossRecord, Model};
use crate::pretrain::{
    build_contrastive_samples, build_demonstration, check_alpha, demonstration_vocabulary,
    dominant_label, mask_demonstration, mlm_loss, scl_loss, ContrastiveBatch, ContrastiveGroup,
    ContrastiveSamples, DemonstrationSample, MaskedInstance,
};
use crate::proto::{build_prototypes, cls_loss, type_spans, Families, TypedSpan};
use crate::seed;
use crate::span::{decode_spans, span_loss_var, ScoredSpan, SpanLabelMatrix, SpanScoreMatrix};

/// Vocabulary over the training split plus demonstration and label tokens.
pub fn build_vocabulary(train: &[Sentence]) -> Vocabulary {
    let labels = label_set(train);
    let extra = demonstration_vocabulary(&labels);
    Vocabulary::build(train, extra.iter().map(String::as_str))
}

/// Adam with bias-corrected first and second moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: GradBuffer,
    v: GradBuffer,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: GradBuffer::zeros_like(store),
            v: GradBuffer::zeros_like(store),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        let step_size = lr / c1;
        for id in ids {
            let g = grads.get(id);
            self.m.get_mut(id).zip_mut_with(g, |m, g| *m = b1 * *m + (1.0 - b1) * g);
            self.v.get_mut(id).zip_mut_with(g, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.m.get(id), self.v.get(id));
            for ((p, m), v) in store.get_mut(id).iter_mut().zip(m).zip(v) {
                *p -= step_size * m / ((v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.peak;
        }
        let left = self.total_steps.saturating_sub(step) as f64;
        self.peak * left / (self.total_steps - self.warmup_steps) as f64
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut GradBuffer, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the number of optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub warmup_ratio: f64,
    pub alpha: f64,
    pub tau: f64,
    pub k_rd: usize,
    pub k_nd: usize,
    pub n_mask: usize,
    pub include_positive_in_denominator: bool,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 8,
            epochs: 5,
            max_steps: 0,
            warmup_ratio: 0.0,
            alpha: crate::pretrain::DEFAULT_ALPHA,
            tau: crate::pretrain::DEFAULT_TEMPERATURE,
            k_rd: crate::pretrain::DEFAULT_K_RD,
            k_nd: crate::pretrain::DEFAULT_K_ND,
            n_mask: crate::pretrain::DEFAULT_N_MASK,
            include_positive_in_denominator: false,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha).map_err(|e| Error::Config(format!("pretrain.alpha: {e}")))?;
        if !(self.lr > 0.0) {
            return Err(Error::Config("pretrain.lr must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "pretrain.batch_size and pretrain.epochs must be positive".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("pretrain.tau must be positive".into()));
        }
        if self.n_mask == 0 {
            return Err(Error::Config("pretrain.n_mask must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("pretrain.warmup_ratio outside [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything built from one sentence for one pre-training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainInstance {
    pub demonstration: DemonstrationSample,
    pub masked: Option<MaskedInstance>,
    pub contrastive: ContrastiveSamples,
    pub class: String,
}

/// `None` when the sentence has no entity.
pub fn build_pretrain_instance(
    x: &Sentence,
    index: &EntityIndex,
    labels: &[String],
    vocab: &Vocabulary,
    max_len: usize,
    config: &PretrainConfig,
    sample_seed: u64,
) -> Result<Option<PretrainInstance>> {
    let Some(mut demonstration) = build_demonstration(
        x,
        index,
        config.k_rd,
        config.k_nd,
        seed::derive(sample_seed, "demonstration"),
    ) else {
        return Ok(None);
    };
    demonstration.truncate(max_len);
    let masked = if demonstration.units.is_empty() {
        None
    } else {
        Some(mask_demonstration(
            &demonstration,
            vocab,
            config.n_mask,
            seed::derive(sample_seed, "mask"),
        )?)
    };
    let contrastive =
        build_contrastive_samples(x, labels, seed::derive(sample_seed, "contrastive"))?;
    let class = dominant_label(x).expect("has entities").to_owned();
    Ok(Some(PretrainInstance {
        demonstration,
        masked,
        contrastive,
        class,
    }))
}

/// Joint loss of one batch: mean per-sample MLM sum and SCL over the batch.
pub struct PretrainLoss {
    pub total: Var,
    pub mlm: Option<Var>,
    pub scl: Option<Var>,
}

pub fn pretrain_batch_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &[(&Sentence, &PretrainInstance)],
    config: &PretrainConfig,
    dropout: &mut Dropout,
) -> Result<PretrainLoss> {
    let max_len = model.max_len();
    let mut mlm_terms = Vec::new();
    if config.alpha > 0.0 {
        for (_, inst) in batch {
            let Some(m) = &inst.masked else { continue };
            let h = model.encoder.forward(tape, &model.store, &m.input_ids, dropout)?;
            let logits = model.mlm.logits(tape, &model.store, h, &m.masked_positions)?;
            mlm_terms.push(mlm_loss(tape, logits, &m.target_ids)?);
        }
    }
    let mlm = if mlm_terms.is_empty() {
        None
    } else {
        let n = mlm_terms.len() as f64;
        let stacked = tape.concat_rows(&mlm_terms);
        let sum = tape.sum_all(stacked);
        Some(tape.scale(sum, 1.0 / n))
    };

    let scl = if config.alpha < 1.0 {
        let mut pooled = |tape: &mut Tape, tokens: &[String]| -> Result<Var> {
            let t = crate::encoder::tokenize(tokens, &model.vocab, max_len);
            let h = model.encoder.forward(tape, &model.store, &t.ids, dropout)?;
            pool(tape, h)
        };
        let mut groups = Vec::with_capacity(batch.len());
        for (x, inst) in batch {
            let anchor = pooled(tape, &x.tokens)?;
            let mut positives = Vec::new();
            for (p, label) in inst
                .contrastive
                .positives
                .iter()
                .zip(&inst.contrastive.positive_labels)
            {
                positives.push((pooled(tape, p)?, label.clone()));
            }
            let hard_negative = pooled(tape, &inst.contrastive.hard_negative)?;
            groups.push(ContrastiveGroup {
                anchor,
                positives,
                hard_negative,
                class: inst.class.clone(),
            });
        }
        let mut cb = ContrastiveBatch::new(groups, config.tau);
        cb.include_positive_in_denominator = config.include_positive_in_denominator;
        Some(scl_loss(tape, &cb)?)
    } else {
        None
    };

    let total = match (mlm, scl) {
        (Some(m), Some(s)) => crate::pretrain::joint_pretrain_loss(tape, m, s, config.alpha)?,
        (Some(m), None) => m,
        (None, Some(s)) => s,
        (None, None) => return Err(Error::invalid("pre-training batch produced no loss term")),
    };
    Ok(PretrainLoss { total, mlm, scl })
}

/// Trains the encoder and MLM head on the joint objective; returns the
/// per-step loss history.
pub fn run_pretraining(
    model: &mut Model,
    corpus: &[Sentence],
    index: &EntityIndex,
    config: &PretrainConfig,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let usable: Vec<usize> = (0..corpus.len()).filter(|i| !corpus[*i].spans.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::invalid("pre-training corpus has no entity-bearing sentence"));
    }
    let labels = label_set(corpus);
    let per_epoch = usable.len().div_ceil(config.batch_size);
    let mut total_steps = per_epoch * config.epochs;
    if config.max_steps > 0 {
        total_steps = total_steps.min(config.max_steps);
    }
    let schedule = LinearSchedule::new(config.lr, config.warmup_ratio, total_steps);
    let mut adam = Adam::new(&model.store);
    let mut grads = GradBuffer::zeros_like(&model.store);
    let mut history = Vec::with_capacity(total_steps);
    let mut order = usable.clone();
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(seed::derive_indexed(config.seed, "pretrain.order", epoch as u64)));
        for chunk in order.chunks(config.batch_size) {
            if step == total_steps {
                break 'epochs;
            }
            step += 1;
            let mut instances = Vec::with_capacity(chunk.len());
            for (i, &idx) in chunk.iter().enumerate() {
                let sample_seed =
                    seed::derive_indexed(config.seed, "pretrain.sample", (step * config.batch_size + i) as u64);
                let inst = build_pretrain_instance(
                    &corpus[idx],
                    index,
                    &labels,
                    &model.vocab,
                    model.max_len(),
                    config,
                    sample_seed,
                )?
                .expect("entity-bearing");
                instances.push((&corpus[idx], inst));
            }
            let batch: Vec<(&Sentence, &PretrainInstance)> =
                instances.iter().map(|(x, i)| (*x, i)).collect();
            let mut rng = seed::rng(seed::derive_indexed(config.seed, "pretrain.dropout", step as u64));
            let mut dropout = Dropout::train(model.config.encoder.dropout, &mut rng);
            let mut tape = Tape::new();
            let loss = pretrain_batch_loss(&mut tape, model, &batch, config, &mut dropout)?;
            let g = tape.backward(loss.total);
            grads.zero();
            tape.accumulate_param_grads(&g, &mut grads);
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut model.store, &grads, schedule.lr(step));
            history.push(LossRecord {
                step,
                l_mlm: loss.mlm.map(|v| tape.scalar(v)),
                l_scl: loss.scl.map(|v| tape.scalar(v)),
                l_span: None,
                l_cls: None,
            });
        }
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeTrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub episode_batch: usize,
    /// Steps that optimize the span loss alone.
    pub t_span_only: usize,
    pub max_steps: usize,
    /// Loss-logging and checkpoint interval.
    pub eval_interval: usize,
    pub clip_norm: f64,
    pub families: Families,
    /// Which set the classification loss is computed on.
    pub cls_on: ClsOn,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsOn {
    #[default]
    Query,
    Support,
}

impl Default for EpisodeTrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            warmup_ratio: 0.1,
            episode_batch: 4,
            t_span_only: 2000,
            max_steps: 4000,
            eval_interval: 200,
            clip_norm: 1.0,
            families: Families::ALL,
            cls_on: ClsOn::Query,
            seed: 0,
        }
    }
}

impl EpisodeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.episode_batch == 0 || self.max_steps == 0 {
            return Err(Error::Config(
                "train.episode_batch and train.max_steps must be positive".into(),
            ));
        }
        if self.t_span_only >= self.max_steps {
            return Err(Error::Config(format!(
                "train.t_span_only ({}) must be below train.max_steps ({})",
                self.t_span_only, self.max_steps
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("train.warmup_ratio outside [0, 1)".into()));
        }
        Ok(())
    }
}

pub struct EpisodeLoss {
    pub total: Var,
    pub span: Var,
    pub cls: Option<Var>,
}

/// Span loss averaged over support sentences, plus (when `with_cls`) the
/// classification loss on the query set divided by its span count.
pub fn episode_loss(
    tape: &mut Tape,
    model: &Model,
    episode: &Episode,
    with_cls: bool,
    families: Families,
    cls_on: ClsOn,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<EpisodeLoss> {
    let max_span = model.config.max_span_len;
    let mut enc = model.token_encoder(dropout_rng);
    let mut span_terms = Vec::with_capacity(episode.support.len());
    for x in &episode.support {
        let h = crate::proto::TokenEncoder::encode_tokens(&mut enc, tape, &x.tokens)?;
        let len = tape.shape(h).0;
        let f = model.scorer.scores(tape, &model.store, h)?;
        let (omega, _) =
            SpanLabelMatrix::lenient(len, max_span, x.spans.iter().map(|s| (s.start, s.end)));
        span_terms.push(span_loss_var(tape, f, &omega)?);
    }
    if span_terms.is_empty() {
        return Err(Error::invalid("episode has an empty support set"));
    }
    let n = span_terms.len() as f64;
    let stacked = tape.concat_rows(&span_terms);
    let sum = tape.sum_all(stacked);
    let span = tape.scale(sum, 1.0 / n);
    if !with_cls {
        return Ok(EpisodeLoss {
            total: span,
            span,
            cls: None,
        });
    }
    let protos = build_prototypes(tape, &mut enc, &episode.support, &episode.types, families)?;
    let targets = match cls_on {
        ClsOn::Query => &episode.query,
        ClsOn::Support => &episode.support,
    };
    let l = cls_loss(tape, &mut enc, targets, &protos)?;
    let cls = tape.scale(l.total, 1.0 / l.spans.max(1) as f64);
    Ok(EpisodeLoss {
        total: tape.add(span, cls),
        span,
        cls: Some(cls),
    })
}

/// Episodic training: span-only for the first `t_span_only` steps, then
/// span plus classification. Returns per-step losses.
pub fn run_episode_training(
    model: &mut Model,
    episodes: &[Episode],
    config: &EpisodeTrainConfig,
    mut on_interval: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::invalid("no training episodes"));
    }
    for (i, ep) in episodes.iter().enumerate() {
        if ep.support.is_empty() || ep.query.is_empty() || ep.types.is_empty() {
            return Err(Error::Validation(format!("episode {i} is incomplete")));
        }
    }
    let schedule = LinearSchedule::new(config.lr, config.warmup_ratio, config.max_steps);
    let mut adam = Adam::new(&model.store);
    let mut grads = GradBuffer::zeros_like(&model.store);
    let mut history = Vec::with_capacity(config.max_steps);
    let mut order: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    for step in 1..=config.max_steps {
        let with_cls = step > config.t_span_only;
        grads.zero();
        let (mut span_sum, mut cls_sum) = (0.0, 0.0);
        for b in 0..config.episode_batch {
            if order.is_empty() {
                order = (0..episodes.len()).collect();
                order.shuffle(&mut seed::rng(seed::derive_indexed(config.seed, "train.order", pass)));
                order.reverse();
                pass += 1;
            }
            let idx = order.pop().expect("refilled");
            let mut rng = seed::rng(seed::derive_indexed(
                config.seed,
                "train.dropout",
                (step * config.episode_batch + b) as u64,
            ));
            let mut tape = Tape::new();
            let loss = episode_loss(
                &mut tape,
                model,
                &episodes[idx],
                with_cls,
                config.families,
                config.cls_on,
                Some(&mut rng),
            )
            .map_err(|e| match e {
                Error::InvalidInput(m) => Error::Validation(format!("episode {idx}: {m}")),
                other => other,
            })?;
            let scaled = tape.scale(loss.total, 1.0 / config.episode_batch as f64);
            let g = tape.backward(scaled);
            tape.accumulate_param_grads(&g, &mut grads);
            span_sum += tape.scalar(loss.span);
            cls_sum += loss.cls.map(|c| tape.scalar(c)).unwrap_or(0.0);
        }
        clip_global_norm(&mut grads, config.clip_norm);
        adam.step(&mut model.store, &grads, schedule.lr(step));
        let nb = config.episode_batch as f64;
        history.push(LossRecord {
            step,
            l_mlm: None,
            l_scl: None,
            l_span: Some(span_sum / nb),
            l_cls: with_cls.then_some(cls_sum / nb),
        });
        if config.eval_interval > 0 && step % config.eval_interval == 0 {
            on_interval(step, model)?;
        }
    }
    Ok(history)
}

/// Predictions for one query sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentencePrediction {
    pub extracted: Vec<ScoredSpan>,
    pub typed: Vec<TypedSpan>,
}

/// Original-family prototypes from the support set; spans decoded and typed
/// on each query sentence. Query gold spans are never read.
pub fn infer_episode(model: &Model, support: &[Sentence], types: &[String], query_tokens: &[Vec<String>]) -> Result<Vec<SentencePrediction>> {
    let mut tape = Tape::new();
    let mut enc = model.token_encoder(None);
    let protos = build_prototypes(&mut tape, &mut enc, support, types, Families::ORIGINAL_ONLY)?
        .values(&tape);
    let mut out = Vec::with_capacity(query_tokens.len());
    for tokens in query_tokens {
        let h = model.encode_sentence(tokens)?;
        if h.nrows() == 0 {
            out.push(SentencePrediction {
                extracted: vec![],
                typed: vec![],
            });
            continue;
        }
        let f = crate::span::score_spans(
            &crate::encoder::HiddenStates(h.clone()),
            &model.scorer,
            &model.store,
            model.config.max_span_len,
        )?;
        let extracted = decode_spans(&f, 0.0, true);
        let cells: Vec<(usize, usize)> = extracted.iter().map(|s| (s.start, s.end)).collect();
        let typed = type_spans(&h, &cells, &protos)?;
        out.push(SentencePrediction { extracted, typed });
    }
    Ok(out)
}

pub fn infer(model: &Model, episode: &Episode) -> Result<Vec<SentencePrediction>> {
    let tokens: Vec<Vec<String>> = episode.query.iter().map(|q| q.tokens.clone()).collect();
    infer_episode(model, &episode.support, &episode.types, &tokens)
}

/// Mean evaluation-mode span loss over every query sentence; used to check
/// that a restored checkpoint behaves identically.
pub fn eval_span_loss(model: &Model, episodes: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ep in episodes {
        for x in &ep.query {
            let h = crate::encoder::HiddenStates(model.encode_sentence(&x.tokens)?);
            let f: SpanScoreMatrix =
                crate::span::score_spans(&h, &model.scorer, &model.store, model.config.max_span_len)?;
            let (omega, _) = SpanLabelMatrix::lenient(
                f.len(),
                model.config.max_span_len,
                x.spans.iter().map(|s| (s.start, s.end)),
            );
            total += crate::span::span_loss(&f, &omega)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no query sentences"));
    }
    Ok(total / n as f64)
}
