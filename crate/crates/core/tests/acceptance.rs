//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each, and exits non-zero if any criterion fails.
//!
//! `cargo test -p msdp-core --test acceptance -- 1 3 7` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use msdp_autograd::check::relative_error;
use msdp_autograd::ndarray::Array2;
use msdp_autograd::{Tape, Var};
use msdp_core::corpus::{build_entity_index, generate_synthetic_corpus, label_set, EntitySpan, Sentence, SynthConfig};
use msdp_core::encoder::{Dropout, EncoderConfig};
use msdp_core::episodes::{sample_episode, sample_episodes, validate_episode, write_episodes, Episode, SamplerConfig};
use msdp_core::eval::{
    error_analysis, evaluate, run_ablation, Benchmark, ErrorBreakdown, MetricsReport, RunConfig, Typed, Variant,
};
use msdp_core::model::{Checkpoint, Model, ModelConfig};
use msdp_core::pretrain::{scl_loss, ContrastiveBatch, ContrastiveGroup};
use msdp_core::proto::{apply_mask, Families, ViewKind};
use msdp_core::span::{span_loss, span_loss_var, SpanLabelMatrix, SpanScoreMatrix};
use msdp_core::train::{
    build_pretrain_instance, build_vocabulary, episode_loss, eval_span_loss, pretrain_batch_loss, ClsOn,
    PretrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn synth_corpus(n: usize, seed: u64) -> Vec<Sentence> {
    let path = root().join("configs/synth.toml");
    let cfg = SynthConfig::load(&path).unwrap();
    let lex = cfg.load_lexicons(path.parent().unwrap()).unwrap();
    generate_synthetic_corpus(n, &lex, &cfg.templates().unwrap(), seed).unwrap()
}

fn toy_config() -> RunConfig {
    let cfg = RunConfig::load(&root().join("configs/toy.toml")).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- criterion 1

fn brute_span_loss(f: &Array2<f64>, max_len: usize, gold: &[(usize, usize)]) -> f64 {
    let l = f.nrows();
    let mut sum = 0.0f64;
    for i in 0..l {
        for j in i..l {
            if j - i >= max_len {
                continue;
            }
            let sign = if gold.contains(&(i, j)) { -1.0 } else { 1.0 };
            sum += (sign * f[[i, j]]).exp();
        }
    }
    (1.0 + sum).ln()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

struct RawGroup {
    anchor: Vec<f64>,
    positives: Vec<(Vec<f64>, String)>,
    hard_negative: Vec<f64>,
    class: String,
}

/// Contrastive loss evaluated term by term as a ratio of exponentials.
fn direct_scl(groups: &[RawGroup], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, g) in groups.iter().enumerate() {
        let mut denom = (cosine(&g.anchor, &g.hard_negative) / tau).exp();
        for (l, other) in groups.iter().enumerate() {
            if l != i && other.class != g.class {
                denom += (cosine(&g.anchor, &other.anchor) / tau).exp();
            }
        }
        let k = g.positives.len() as f64;
        let mut inner = 0.0;
        for (p, label) in &g.positives {
            let same = g.positives.iter().filter(|(_, l)| l == label).count() as f64;
            let num = (cosine(&g.anchor, p) / tau).exp();
            inner += same / k * (num / denom).ln();
        }
        total += inner;
    }
    -total / groups.len() as f64
}

fn tape_scl(groups: &[RawGroup], tau: f64) -> f64 {
    let mut t = Tape::new();
    let gs = groups
        .iter()
        .map(|g| ContrastiveGroup {
            anchor: t.row(&g.anchor),
            positives: g.positives.iter().map(|(p, l)| (t.row(p), l.clone())).collect(),
            hard_negative: t.row(&g.hard_negative),
            class: g.class.clone(),
        })
        .collect();
    let v = scl_loss(&mut t, &ContrastiveBatch::new(gs, tau)).unwrap();
    t.scalar(v)
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_span = 0.0f64;
    for _ in 0..1000 {
        let l = rng.gen_range(1..=8);
        let max_len = rng.gen_range(1..=8);
        let scale = if rng.gen_bool(0.2) { 40.0 } else { 4.0 };
        let values = Array2::from_shape_fn((l, l), |_| rng.gen_range(-scale..scale));
        let f = SpanScoreMatrix::new(values.clone(), max_len).unwrap();
        let cells = f.cells();
        let gold: Vec<(usize, usize)> = cells.iter().copied().filter(|_| rng.gen_bool(0.3)).collect();
        let omega = SpanLabelMatrix::new(l, max_len, gold.iter().copied()).unwrap();
        let expected = brute_span_loss(&values, max_len, &gold);
        let got = span_loss(&f, &omega).unwrap();
        let mut t = Tape::new();
        let fv = t.leaf(values);
        let lv = span_loss_var(&mut t, fv, &omega).unwrap();
        let err = (got - expected).abs().max((t.scalar(lv) - expected).abs()) / expected.abs().max(1.0);
        worst_span = worst_span.max(err);
    }
    ensure(worst_span <= 1e-9, || format!("span_loss deviates by {worst_span:e}"))?;

    let mut worst_scl = 0.0f64;
    let classes = ["A", "B", "C"];
    for _ in 0..200 {
        let dim = rng.gen_range(1..=4);
        let n_groups = rng.gen_range(1..=2);
        let mut groups = Vec::new();
        let mut budget = 8;
        for _ in 0..n_groups {
            let max_pos = (budget - 2).min(3);
            if max_pos == 0 {
                break;
            }
            let k = rng.gen_range(1..=max_pos);
            budget -= 2 + k;
            groups.push(RawGroup {
                anchor: random_vector(&mut rng, dim),
                positives: (0..k)
                    .map(|_| (random_vector(&mut rng, dim), classes[rng.gen_range(0..3)].to_owned()))
                    .collect(),
                hard_negative: random_vector(&mut rng, dim),
                class: classes[rng.gen_range(0..3)].to_owned(),
            });
        }
        let tau = rng.gen_range(0.1..2.0);
        let err = (direct_scl(&groups, tau) - tape_scl(&groups, tau)).abs();
        worst_scl = worst_scl.max(err);
    }
    ensure(worst_scl <= 1e-9, || format!("scl_loss deviates by {worst_scl:e}"))?;

    let hand = |a: [f64; 2], b: [f64; 2], c: &str| RawGroup {
        anchor: a.to_vec(),
        positives: vec![(a.to_vec(), c.to_owned())],
        hard_negative: b.to_vec(),
        class: c.to_owned(),
    };
    let groups = [hand([1.0, 0.0], [0.0, 1.0], "PER"), hand([0.0, 1.0], [1.0, 0.0], "LOC")];
    let got = tape_scl(&groups, 0.5);
    let expected = -(2f64.exp() / 2.0).ln();
    ensure((got - expected).abs() < 1e-12 && format!("{got:.6}") == "-1.306853", || {
        format!("hand example gave {got}")
    })?;
    Ok(format!(
        "span max rel err {worst_span:.1e} over 1000, SCL max err {worst_scl:.1e} over 200, hand example {got:.6}"
    ))
}

// ---------------------------------------------------------------- criterion 2

fn small_model(corpus: &[Sentence]) -> Model {
    let config = ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            hidden_dim: 32,
            heads: 4,
            max_len: 48,
            dropout: 0.0,
            ffn_dim: 0,
        },
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, build_vocabulary(corpus), 5).unwrap();
    // Move away from the near-symmetric init so every path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).mapv_inplace(|x| x + rng.gen_range(-0.2..0.2));
    }
    model
}

/// Finite differences on a sample of entries from every parameter tensor,
/// compared with reverse-mode gradients over the concatenated sample.
fn param_grad_error(model: &Model, loss: &dyn Fn(&mut Tape, &Model) -> Var, per_tensor: usize) -> f64 {
    let mut tape = Tape::new();
    let root = loss(&mut tape, model);
    let grads = tape.backward(root);
    let analytic: BTreeMap<usize, Array2<f64>> = tape
        .param_grads(&grads)
        .into_iter()
        .map(|(id, g)| (id.index(), g.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut probe = model.clone();
    let value = |m: &Model| {
        let mut t = Tape::new();
        let v = loss(&mut t, m);
        t.scalar(v)
    };
    for id in model.store.ids().collect::<Vec<_>>() {
        let (rows, cols) = model.store.get(id).dim();
        for _ in 0..per_tensor.min(rows * cols) {
            let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
            let orig = model.store.get(id)[[r, c]];
            probe.store.get_mut(id)[[r, c]] = orig + 1e-5;
            let plus = value(&probe);
            probe.store.get_mut(id)[[r, c]] = orig - 1e-5;
            let minus = value(&probe);
            probe.store.get_mut(id)[[r, c]] = orig;
            n.push((plus - minus) / 2e-5);
            a.push(analytic.get(&id.index()).map_or(0.0, |g| g[[r, c]]));
        }
    }
    relative_error(&a, &n)
}

fn leaf_grad_error(inputs: &[Array2<f64>], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.wrt(*var).cloned().unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
        a.extend(g.iter().copied());
        let num = msdp_autograd::check::numerical_grad(&inputs[k], 1e-5, |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = build(&mut t, &vs);
            t.scalar(out)
        });
        n.extend(num.iter().copied());
    }
    relative_error(&a, &n)
}

fn criterion_2() -> Outcome {
    let corpus = synth_corpus(120, 3);
    let model = small_model(&corpus);
    let index = build_entity_index(&corpus);
    let labels = label_set(&corpus);
    let cfg = |alpha: f64| PretrainConfig {
        alpha,
        k_rd: 2,
        k_nd: 1,
        ..PretrainConfig::default()
    };
    let instances: Vec<_> = corpus
        .iter()
        .filter(|x| !x.spans.is_empty())
        .take(3)
        .enumerate()
        .map(|(i, x)| {
            let inst = build_pretrain_instance(x, &index, &labels, &model.vocab, model.max_len(), &cfg(0.6), i as u64)
                .unwrap()
                .unwrap();
            (x.clone(), inst)
        })
        .collect();
    let pretrain_term = |alpha: f64, pick: fn(&msdp_core::train::PretrainLoss) -> Var| {
        let instances = &instances;
        move |t: &mut Tape, m: &Model| {
            let batch: Vec<_> = instances.iter().map(|(x, i)| (x, i)).collect();
            let l = pretrain_batch_loss(t, m, &batch, &cfg(alpha), &mut Dropout::off()).unwrap();
            pick(&l)
        }
    };
    let mlm = pretrain_term(1.0, |l| l.mlm.unwrap());
    let scl = pretrain_term(0.0, |l| l.scl.unwrap());
    let joint = pretrain_term(0.6, |l| l.total);

    let ep = sample_episode(&corpus, &SamplerConfig::new(3, 1), 4).unwrap();
    let span = |t: &mut Tape, m: &Model| {
        episode_loss(t, m, &ep, false, Families::ORIGINAL_ONLY, ClsOn::Query, None).unwrap().span
    };
    let cls = |t: &mut Tape, m: &Model| {
        episode_loss(t, m, &ep, true, Families::ALL, ClsOn::Query, None).unwrap().cls.unwrap()
    };

    let mut report = Vec::new();
    let mut worst = 0.0f64;
    let checks: [(&str, &dyn Fn(&mut Tape, &Model) -> Var); 5] =
        [("mlm", &mlm), ("scl", &scl), ("joint", &joint), ("span", &span), ("cls", &cls)];
    for (name, f) in checks {
        let e = param_grad_error(&model, f, 6);
        worst = worst.max(e);
        report.push(format!("{name} {e:.1e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));
    let inputs = vec![m(1, 4), m(2, 4), m(1, 4), m(1, 4), m(1, 4), m(1, 4)];
    let e = leaf_grad_error(&inputs, &|t, v| {
        let g0 = ContrastiveGroup {
            anchor: v[0],
            positives: vec![(t.slice_rows(v[1], 0, 1), "A".into()), (t.slice_rows(v[1], 1, 1), "B".into())],
            hard_negative: v[2],
            class: "A".into(),
        };
        let g1 = ContrastiveGroup {
            anchor: v[3],
            positives: vec![(v[4], "B".into())],
            hard_negative: v[5],
            class: "B".into(),
        };
        scl_loss(t, &ContrastiveBatch::new(vec![g0, g1], 0.5)).unwrap()
    });
    worst = worst.max(e);
    report.push(format!("scl/vectors {e:.1e}"));
    let scores = m(6, 6);
    let omega = SpanLabelMatrix::new(6, 4, [(0, 0), (2, 4)]).unwrap();
    let e = leaf_grad_error(&[scores], &|t, v| span_loss_var(t, v[0], &omega).unwrap());
    worst = worst.max(e);
    report.push(format!("span/scores {e:.1e}"));

    ensure(worst < 1e-3, || format!("relative error too large: {}", report.join(", ")))?;
    Ok(format!("max rel err {worst:.1e} ({})", report.join(", ")))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let x = Sentence::from_words(
        "Mike wants to go to school on Sunday",
        vec![EntitySpan::new(0, 0, "PER"), EntitySpan::new(5, 5, "LOC"), EntitySpan::new(7, 7, "DATE")],
    )
    .unwrap();
    let types: Vec<String> = ["PER", "LOC", "DATE"].map(String::from).to_vec();
    let co = apply_mask(&x, &ViewKind::ClassOriented("PER".into()), &types).unwrap().masked_tokens.join(" ");
    let ctx = apply_mask(&x, &ViewKind::Contextual, &types).unwrap().masked_tokens.join(" ");
    ensure(co == "Mike wants to go to [MASK] on [MASK]", || format!("class-oriented view: {co}"))?;
    ensure(ctx == "[MASK] wants to go to [MASK] on [MASK]", || format!("contextual view: {ctx}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let words = ["alpha", "beta", "gamma", "delta", "[MASK]", "on", "to", "x"];
    let labels = ["PER", "LOC", "ORG"];
    for case in 0..1000 {
        let len = rng.gen_range(1..=14);
        let tokens: Vec<String> = (0..len).map(|_| words[rng.gen_range(0..words.len())].to_owned()).collect();
        let mut spans = Vec::new();
        let mut pos = 0;
        while pos < len {
            if rng.gen_bool(0.35) {
                let end = (pos + rng.gen_range(0..3)).min(len - 1);
                spans.push(EntitySpan::new(pos, end, labels[rng.gen_range(0..3)]));
                pos = end + 2;
            } else {
                pos += 1;
            }
        }
        let x = Sentence::new(tokens, spans).unwrap();
        let all: Vec<String> = labels.map(String::from).to_vec();
        let view = match rng.gen_range(0..3) {
            0 => ViewKind::Original,
            1 => ViewKind::Contextual,
            _ => ViewKind::ClassOriented(labels[rng.gen_range(0..3)].into()),
        };
        let out = apply_mask(&x, &view, &all).unwrap().masked_tokens;
        ensure(out.len() == x.tokens.len(), || format!("case {case}: token count changed"))?;
        for (i, tok) in out.iter().enumerate() {
            let span = x.spans.iter().find(|s| s.contains(i));
            let masked = match (&view, span) {
                (_, None) | (ViewKind::Original, _) => false,
                (ViewKind::Contextual, Some(_)) => true,
                (ViewKind::ClassOriented(t), Some(s)) => s.label != *t,
            };
            let expected = if masked { "[MASK]" } else { x.tokens[i].as_str() };
            ensure(tok == expected, || format!("case {case}, position {i}: got {tok}, expected {expected}"))?;
        }
    }
    Ok("worked example verbatim; 1000 random views preserve counts and unmasked tokens".into())
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let corpus = synth_corpus(2500, 1);
    let cfg = SamplerConfig::new(5, 1);
    let episodes = sample_episodes(&corpus, &cfg, 1000, 44).map_err(|e| e.to_string())?;
    for (i, ep) in episodes.iter().enumerate() {
        let r = validate_episode(ep, &cfg);
        ensure(r.is_valid(), || format!("episode {i}: {:?}", r.violations))?;
    }
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, seed: u64| {
        let p = dir.path().join(name);
        let eps = sample_episodes(&corpus, &cfg, 1000, seed).unwrap();
        write_episodes(&eps, &p).unwrap();
        std::fs::read(p).unwrap()
    };
    let (a, b, c) = (write("a", 44), write("b", 44), write("c", 45));
    ensure(a == b, || "same seed produced different bytes".into())?;
    ensure(a != c, || "different seeds produced identical bytes".into())?;
    Ok(format!("1000/1000 episodes valid; {} bytes reproduced exactly", a.len()))
}

// ------------------------------------------------------------ criteria 5 and 6

struct ToyBench {
    train_corpus: Vec<Sentence>,
    train_episodes: Vec<Episode>,
    test_episodes: Vec<Episode>,
}

fn toy_bench() -> ToyBench {
    let corpus = synth_corpus(2500, 1);
    let (train, test) = corpus.split_at(2000);
    let cfg = SamplerConfig::new(5, 1);
    ToyBench {
        train_episodes: sample_episodes(train, &cfg, 200, 11).unwrap(),
        test_episodes: sample_episodes(test, &cfg, 50, 12).unwrap(),
        train_corpus: train.to_vec(),
    }
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn mean(reports: &[MetricsReport], variant: Variant, f: fn(&MetricsReport) -> f64) -> f64 {
    let xs: Vec<f64> = reports.iter().filter(|r| r.variant == variant.name()).map(f).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn toy_reports() -> &'static [MetricsReport] {
    static REPORTS: std::sync::OnceLock<Vec<MetricsReport>> = std::sync::OnceLock::new();
    REPORTS.get_or_init(|| {
        let b = toy_bench();
        let bench = Benchmark {
            train_corpus: &b.train_corpus,
            train_episodes: &b.train_episodes,
            test_episodes: &b.test_episodes,
        };
        let variants = [Variant::Full, Variant::Base, Variant::NoDemoMlm];
        run_ablation(&bench, &toy_config(), &variants, &SEEDS, |r| {
            println!(
                "    {} seed {}: micro F1 {:.4}, extractor P {:.4} R {:.4}, FP-Type rate {:.4}",
                r.variant, r.seed, r.micro.f1, r.extractor.p, r.extractor.r, r.errors.fp_type_rate
            );
        })
        .unwrap()
    })
}

fn criterion_5() -> Outcome {
    let reports = toy_reports();
    let full = mean(reports, Variant::Full, |r| r.micro.f1);
    let base = mean(reports, Variant::Base, |r| r.micro.f1);
    let detail = format!("full {full:.4}, base {base:.4}, gap {:+.2} points", 100.0 * (full - base));
    ensure(full >= 0.60, || format!("(a) full below 0.60: {detail}"))?;
    ensure(full - base >= 0.02, || format!("(b) full does not beat base by 2 points: {detail}"))?;
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let reports = toy_reports();
    let p_with = mean(reports, Variant::Full, |r| r.extractor.p);
    let p_without = mean(reports, Variant::NoDemoMlm, |r| r.extractor.p);
    let r_with = mean(reports, Variant::Full, |r| r.extractor.r);
    let r_without = mean(reports, Variant::NoDemoMlm, |r| r.extractor.r);
    let detail = format!(
        "precision {p_with:.4} vs {p_without:.4}, recall {r_with:.4} vs {r_without:.4} (with vs without demonstration MLM)"
    );
    ensure(p_with > p_without, || format!("precision does not improve: {detail}"))?;
    ensure((r_with - r_without).abs() <= 0.02, || format!("recall moves more than 2 points: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 7

fn t(s: usize, e: usize, l: &str) -> Typed {
    (s, e, l.to_owned())
}

fn criterion_7() -> Outcome {
    // (predictions, gold, expected fp_type, fp_span, fn, predictions)
    let cases: Vec<(Vec<Typed>, Vec<Typed>, [usize; 4])> = vec![
        (vec![t(0, 0, "PER")], vec![t(0, 0, "PER")], [0, 0, 0, 1]),
        (vec![t(0, 0, "LOC")], vec![t(0, 0, "PER")], [1, 0, 1, 1]),
        (vec![t(0, 1, "PER")], vec![t(0, 0, "PER")], [0, 1, 1, 1]),
        (vec![], vec![t(2, 3, "ORG")], [0, 0, 1, 0]),
        (vec![t(4, 4, "DATE")], vec![], [0, 1, 0, 1]),
        (vec![t(0, 0, "LOC"), t(2, 2, "PER")], vec![t(0, 0, "PER"), t(2, 2, "LOC")], [2, 0, 2, 2]),
        (vec![t(0, 0, "PER"), t(2, 2, "PER")], vec![t(0, 0, "PER"), t(2, 2, "LOC")], [1, 0, 1, 2]),
        (vec![t(1, 2, "ORG")], vec![t(1, 3, "ORG")], [0, 1, 1, 1]),
        (vec![t(1, 3, "LOC")], vec![t(1, 3, "ORG")], [1, 0, 1, 1]),
        (vec![t(1, 3, "ORG"), t(5, 5, "PER")], vec![t(1, 3, "ORG")], [0, 1, 0, 2]),
        (vec![t(0, 0, "PER"), t(1, 1, "PER"), t(2, 2, "PER")], vec![t(1, 1, "LOC")], [1, 2, 1, 3]),
        (vec![t(3, 4, "DATE")], vec![t(3, 3, "DATE"), t(4, 4, "DATE")], [0, 1, 2, 1]),
        (vec![t(3, 3, "DATE"), t(4, 4, "ORG")], vec![t(3, 3, "DATE"), t(4, 4, "DATE")], [1, 0, 1, 2]),
        (vec![t(0, 5, "ORG")], vec![t(0, 2, "ORG"), t(3, 5, "ORG")], [0, 1, 2, 1]),
        (vec![t(0, 0, "X"), t(1, 1, "Y"), t(2, 2, "Z")], vec![t(0, 0, "Y"), t(1, 1, "Z"), t(2, 2, "X")], [3, 0, 3, 3]),
        (vec![t(0, 0, "PER"), t(0, 0, "PER")], vec![t(0, 0, "LOC")], [1, 0, 1, 1]),
        (vec![t(6, 7, "PROD")], vec![t(6, 7, "PROD"), t(9, 9, "LOC")], [0, 0, 1, 1]),
        (vec![t(6, 7, "ORG"), t(9, 9, "LOC")], vec![t(6, 7, "PROD"), t(9, 9, "LOC")], [1, 0, 1, 2]),
        (vec![t(2, 2, "PER"), t(5, 6, "LOC")], vec![t(2, 3, "PER"), t(5, 6, "ORG")], [1, 1, 2, 2]),
        (vec![], vec![], [0, 0, 0, 0]),
    ];
    let mut total = ErrorBreakdown::default();
    for (i, (pred, gold, want)) in cases.iter().enumerate() {
        let got = error_analysis(&[pred.clone()], &[gold.clone()]).map_err(|e| e.to_string())?;
        let got4 = [got.fp_type, got.fp_span, got.fn_, got.predictions];
        ensure(got4 == *want, || format!("case {i}: got {got4:?}, expected {want:?}"))?;
        total = total.add(got);
    }
    let preds: Vec<Vec<Typed>> = cases.iter().map(|c| c.0.clone()).collect();
    let golds: Vec<Vec<Typed>> = cases.iter().map(|c| c.1.clone()).collect();
    let pooled = error_analysis(&preds, &golds).map_err(|e| e.to_string())?;
    ensure(pooled == total, || "pooled counts differ from the per-case sum".into())?;
    Ok(format!(
        "20/20 cases exact; pooled FP-Type {} FP-Span {} over {} predictions",
        pooled.fp_type, pooled.fp_span, pooled.predictions
    ))
}

// ---------------------------------------------------------------- criterion 8

fn tiny_pipeline(seed: u64) -> (String, Checkpoint, Vec<Episode>) {
    let corpus = synth_corpus(300, seed);
    let cfg = SamplerConfig::new(5, 1);
    let train = sample_episodes(&corpus[..240], &cfg, 8, seed).unwrap();
    let test = sample_episodes(&corpus[240..], &cfg, 4, seed + 1).unwrap();
    let mut config = RunConfig::from_toml(
        "[model.encoder]\nhidden_dim = 16\nlayers = 1\nheads = 2\nmax_len = 32\n\
         [pretrain]\nlr = 1e-3\nmax_steps = 6\nbatch_size = 4\n\
         [train]\nlr = 1e-3\nmax_steps = 8\nt_span_only = 3\neval_interval = 0\nepisode_batch = 2\n",
    )
    .unwrap();
    config.validate().unwrap();
    config.model.encoder.dropout = 0.1;
    let bench = Benchmark {
        train_corpus: &corpus[..240],
        train_episodes: &train,
        test_episodes: &test,
    };
    let out = msdp_core::eval::run_variant(&bench, &config, Variant::Full, seed).unwrap();
    (serde_json::to_string_pretty(&out.report).unwrap(), out.checkpoint, test)
}

fn criterion_8() -> Outcome {
    let (json_a, ck, test) = tiny_pipeline(8);
    let (json_b, _, _) = tiny_pipeline(8);
    ensure(json_a == json_b, || "metrics JSON differs between identical runs".into())?;
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(dir.path()).map_err(|e| e.to_string())?;
    let before = eval_span_loss(&ck.model, &test).unwrap();
    let after = eval_span_loss(&back.model, &test).unwrap();
    ensure(before.to_bits() == after.to_bits(), || format!("eval loss {before} became {after}"))?;
    let (r1, _) = evaluate(&ck.model, &test, "full", 8).unwrap();
    let (r2, _) = evaluate(&back.model, &test, "full", 8).unwrap();
    ensure(r1 == r2, || "metrics changed after reload".into())?;
    Ok(format!("metrics JSON identical ({} bytes); eval loss {before:.6} bitwise after reload", json_a.len()))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "loss oracles", criterion_1),
        (2, "gradient checks", criterion_2),
        (3, "masking fidelity", criterion_3),
        (4, "episode sampler", criterion_4),
        (5, "toy benchmark: full >= 0.60 and >= base + 2 points", criterion_5),
        (6, "extractor precision with demonstration MLM", criterion_6),
        (7, "FP-Type error analysis", criterion_7),
        (8, "determinism and persistence", criterion_8),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| {
                p.downcast_ref::<&str>().map(|s| s.to_string()).unwrap_or_else(|| "panicked".into())
            }))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
