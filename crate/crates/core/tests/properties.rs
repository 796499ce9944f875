use std::collections::BTreeSet;

use msdp_autograd::ndarray::Array2;
use msdp_autograd::Tape;
use msdp_core::corpus::{build_entity_index, EntitySpan, Sentence};
use msdp_core::encoder::{Vocabulary, MASK_ID};
use msdp_core::episodes::{sample_episode, SamplerConfig};
use msdp_core::eval::{episode_f1, error_analysis, extractor_pr, span_counts, Typed};
use msdp_core::pretrain::{
    build_demonstration, demonstration_vocabulary, mask_demonstration, scl_loss, ContrastiveBatch, ContrastiveGroup,
};
use msdp_core::proto::{argmax, build_prototypes, classify, Families, TokenEncoder};
use msdp_core::span::{span_loss, span_loss_var, SpanLabelMatrix, SpanScoreMatrix};
use msdp_core::train::LinearSchedule;
use proptest::prelude::*;

const LABELS: [&str; 4] = ["PER", "LOC", "ORG", "DATE"];
const WORDS: [&str; 8] = ["mike", "went", "to", "paris", "acme", "on", "monday", "the"];

prop_compose! {
    fn sentence()(len in 2usize..10, seed in any::<u64>()) -> Sentence {
        let mut state = seed | 1;
        let mut next = |n: usize| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % n as u64) as usize
        };
        let tokens: Vec<String> = (0..len).map(|_| WORDS[next(WORDS.len())].to_owned()).collect();
        let mut spans = Vec::new();
        let mut pos = 0;
        while pos < len {
            if next(3) == 0 {
                let end = (pos + next(2)).min(len - 1);
                spans.push(EntitySpan::new(pos, end, LABELS[next(LABELS.len())]));
                pos = end + 2;
            } else {
                pos += 1;
            }
        }
        Sentence::new(tokens, spans).unwrap()
    }
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-2))
}

#[derive(Clone, Debug)]
struct Raw {
    anchor: Vec<f64>,
    positives: Vec<Vec<f64>>,
    hard: Vec<f64>,
    class: &'static str,
}

fn scl_value(groups: &[Raw], tau: f64, scale: f64) -> f64 {
    let mut t = Tape::new();
    let row = |t: &mut Tape, v: &[f64]| t.row(&v.iter().map(|x| x * scale).collect::<Vec<_>>());
    let gs = groups
        .iter()
        .map(|g| ContrastiveGroup {
            anchor: row(&mut t, &g.anchor),
            positives: g.positives.iter().map(|p| (row(&mut t, p), g.class.to_owned())).collect(),
            hard_negative: row(&mut t, &g.hard),
            class: g.class.to_owned(),
        })
        .collect();
    let v = scl_loss(&mut t, &ContrastiveBatch::new(gs, tau)).unwrap();
    t.scalar(v)
}

fn groups_strategy() -> impl Strategy<Value = Vec<Raw>> {
    prop::collection::vec((vector(3), vector(3), vector(3), 0usize..3), 2..5).prop_map(|gs| {
        gs.into_iter()
            .map(|(a, p, h, c)| Raw {
                anchor: a,
                positives: vec![p],
                hard: h,
                class: ["A", "B", "C"][c],
            })
            .collect()
    })
}

/// Encoder that maps each token to a fixed vector keyed by its text.
struct Lookup;

impl TokenEncoder for Lookup {
    fn encode_tokens(&mut self, tape: &mut Tape, tokens: &[String]) -> msdp_core::Result<msdp_autograd::Var> {
        let rows: Vec<f64> = tokens
            .iter()
            .flat_map(|t| {
                let h = t.bytes().fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
                (0..4).map(move |k| ((h >> (k * 8)) % 17) as f64 - 8.0 + 0.5)
            })
            .collect();
        Ok(tape.leaf(Array2::from_shape_vec((tokens.len(), 4), rows).unwrap()))
    }
}

fn to_typed(s: &Sentence) -> Vec<Typed> {
    s.spans.iter().map(|x| (x.start, x.end, x.label.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn entity_index_lists_labels_and_forms(corpus in prop::collection::vec(sentence(), 1..12)) {
        let index = build_entity_index(&corpus);
        let labels: BTreeSet<&str> = corpus.iter().flat_map(|s| s.spans.iter().map(|x| x.label.as_str())).collect();
        prop_assert_eq!(index.len(), labels.len());
        for label in index.labels() {
            for form in index.entities(label) {
                let seen = corpus.iter().any(|s| s.spans.iter().any(|x| {
                    x.label == label && s.span_tokens(x).iter().map(|t| t.to_lowercase()).eq(form.iter().map(|t| t.to_lowercase()))
                }));
                prop_assert!(seen);
            }
        }
    }

    #[test]
    fn demonstrations_parse_and_keep_the_sentence_unmasked(
        corpus in prop::collection::vec(sentence(), 3..10),
        seed in any::<u64>(),
    ) {
        let index = build_entity_index(&corpus);
        let extra = demonstration_vocabulary(&LABELS.map(String::from));
        let vocab = Vocabulary::build(&corpus, extra.iter().map(String::as_str));
        for x in &corpus {
            let Some(sample) = build_demonstration(x, &index, 3, 2, seed) else {
                prop_assert!(x.spans.is_empty());
                continue;
            };
            let segments = sample.parse_segments();
            prop_assert!(segments.is_some());
            prop_assert_eq!(segments.unwrap()[0].len(), x.spans.len());
            let m = mask_demonstration(&sample, &vocab, 4, seed).unwrap();
            let first = sample.first_sep();
            prop_assert!(m.masked_positions.iter().all(|p| *p > first));
            prop_assert!(m.masked_positions.iter().all(|p| m.input_ids[*p] == MASK_ID));
            prop_assert_eq!(m.masked_positions.len(), m.target_ids.len());
        }
    }

    #[test]
    fn scl_is_scale_and_order_invariant(groups in groups_strategy(), scale in 0.1f64..10.0, tau in 0.2f64..2.0) {
        let base = scl_value(&groups, tau, 1.0);
        prop_assert!((base - scl_value(&groups, tau, scale)).abs() < 1e-9);
        let mut reversed = groups;
        reversed.reverse();
        prop_assert!((base - scl_value(&reversed, tau, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn scl_is_monotone_in_positive_and_hard_negative(groups in groups_strategy(), w in 0.05f64..0.95) {
        let before = scl_value(&groups, 0.5, 1.0);
        let mut closer = groups;
        let g = &closer[0];
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let na = g.anchor.iter().map(|x| x * x).sum::<f64>().sqrt();
        let np = g.positives[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        let moved: Vec<f64> = g.positives[0].iter().zip(&g.anchor).map(|(p, a)| (1.0 - w) * p / np + w * a / na).collect();
        prop_assume!(moved.iter().any(|x| x.abs() > 1e-6));
        let old_cos = cos(&g.anchor, &g.positives[0]);
        prop_assume!(old_cos.abs() < 1.0 - 1e-9);
        closer[0].positives[0] = moved;
        prop_assert!(scl_value(&closer, 0.5, 1.0) < before);

        let mut harder = closer;
        let reference = scl_value(&harder, 0.5, 1.0);
        let g = &harder[0];
        let nh = g.hard.iter().map(|x| x * x).sum::<f64>().sqrt();
        let moved: Vec<f64> = g.hard.iter().zip(&g.anchor).map(|(h, a)| (1.0 - w) * h / nh + w * a / na).collect();
        prop_assume!(moved.iter().any(|x| x.abs() > 1e-6) && cos(&g.anchor, &g.hard).abs() < 1.0 - 1e-9);
        harder[0].hard = moved;
        prop_assert!(scl_value(&harder, 0.5, 1.0) > reference);
    }

    #[test]
    fn span_loss_is_nonnegative_with_correct_gradient_signs(
        len in 1usize..8,
        values in prop::collection::vec(-6.0f64..6.0, 64),
        gold_bits in any::<u64>(),
    ) {
        let f = Array2::from_shape_fn((len, len), |(i, j)| values[i * 8 + j]);
        let m = SpanScoreMatrix::new(f.clone(), 8).unwrap();
        let cells = m.cells();
        let gold: Vec<(usize, usize)> = cells.iter().enumerate().filter(|(k, _)| gold_bits >> (k % 64) & 1 == 1).map(|(_, c)| *c).collect();
        let omega = SpanLabelMatrix::new(len, 8, gold.iter().copied()).unwrap();
        prop_assert!(span_loss(&m, &omega).unwrap() >= 0.0);
        let mut t = Tape::new();
        let fv = t.leaf(f);
        let l = span_loss_var(&mut t, fv, &omega).unwrap();
        let g = t.backward(l);
        let grad = g.wrt(fv).unwrap();
        for (i, j) in cells {
            if omega.is_gold(i, j) {
                prop_assert!(grad[[i, j]] < 0.0);
            } else {
                prop_assert!(grad[[i, j]] > 0.0);
            }
        }
    }

    #[test]
    fn single_mention_prototype_is_the_mention(x in sentence()) {
        prop_assume!(!x.spans.is_empty());
        let s = &x.spans[0];
        let only = Sentence::new(x.tokens.clone(), vec![s.clone()]).unwrap();
        let types = vec![s.label.clone()];
        let mut t = Tape::new();
        let p = build_prototypes(&mut t, &mut Lookup, &[only.clone()], &types, Families::ORIGINAL_ONLY).unwrap();
        let h = Lookup.encode_tokens(&mut t, &only.tokens).unwrap();
        let hv = t.value(h).clone();
        let expected: Vec<f64> = (0..4).map(|k| hv[[s.start, k]] + hv[[s.end, k]]).collect();
        prop_assert_eq!(t.value(p.original).row(0).to_vec(), expected);
    }

    #[test]
    fn prototypes_ignore_support_order(xs in prop::collection::vec(sentence(), 2..6)) {
        let types: Vec<String> = {
            let set: BTreeSet<String> = xs.iter().flat_map(|s| s.spans.iter().map(|x| x.label.clone())).collect();
            set.into_iter().collect()
        };
        prop_assume!(!types.is_empty());
        let mut t = Tape::new();
        let a = build_prototypes(&mut t, &mut Lookup, &xs, &types, Families::ALL).unwrap().values(&t);
        let mut rev = xs.clone();
        rev.reverse();
        let b = build_prototypes(&mut t, &mut Lookup, &rev, &types, Families::ALL).unwrap().values(&t);
        for (x, y) in a.original.iter().zip(b.original.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.contextual.unwrap().iter().zip(b.contextual.unwrap().iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_is_scale_invariant(u in vector(4), protos in prop::collection::vec(vector(4), 2..6), s1 in 0.1f64..10.0, s2 in 0.1f64..10.0) {
        let n = protos.len();
        let c = Array2::from_shape_fn((n, 4), |(r, k)| protos[r][k]);
        let p = classify(&u, &c).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let scaled_u: Vec<f64> = u.iter().map(|x| x * s1).collect();
        let mut scaled_c = c.clone();
        scaled_c.row_mut(0).mapv_inplace(|x| x * s2);
        let q = classify(&scaled_u, &scaled_c).unwrap();
        prop_assert_eq!(argmax(&p), argmax(&q));
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn micro_counts_are_additive(
        golds in prop::collection::vec(sentence(), 1..8),
        preds in prop::collection::vec(sentence(), 8),
        split in 0usize..8,
    ) {
        let g: Vec<Vec<Typed>> = golds.iter().map(to_typed).collect();
        let p: Vec<Vec<Typed>> = preds.iter().take(g.len()).map(to_typed).collect();
        let k = split.min(g.len());
        let whole = span_counts(&p, &g).unwrap();
        let parts = span_counts(&p[..k], &g[..k]).unwrap().add(span_counts(&p[k..], &g[k..]).unwrap());
        prop_assert_eq!(whole, parts);
        let m = episode_f1(&p, &g).unwrap();
        prop_assert_eq!(m, whole.metrics());
        let e = error_analysis(&p, &g).unwrap();
        prop_assert_eq!(e.fp_type + e.fp_span, whole.fp);
    }

    #[test]
    fn extractor_recall_grows_with_predictions(
        gold in prop::collection::vec((0usize..6, 0usize..3), 0..6),
        pred in prop::collection::vec((0usize..6, 0usize..3), 0..8),
        extra in prop::collection::vec((0usize..6, 0usize..3), 0..4),
    ) {
        let cell = |(s, w): (usize, usize)| (s, s + w);
        let g = vec![gold.into_iter().map(cell).collect::<Vec<_>>()];
        let p = vec![pred.into_iter().map(cell).collect::<Vec<_>>()];
        let mut bigger = p.clone();
        bigger[0].extend(extra.into_iter().map(cell));
        let (_, r1) = extractor_pr(&p, &g).unwrap();
        let (_, r2) = extractor_pr(&bigger, &g).unwrap();
        prop_assert!(r2 >= r1);
    }

    #[test]
    fn schedule_warms_up_then_decays(peak in 1e-5f64..1e-2, ratio in 0.0f64..0.5, total in 10usize..500) {
        let s = LinearSchedule::new(peak, ratio, total);
        let warm = (ratio * total as f64).round() as usize;
        if warm > 0 {
            prop_assert!(s.lr(0).abs() < 1e-12);
        }
        prop_assert!((s.lr(warm) - peak).abs() < 1e-9);
        prop_assert!(s.lr(total) <= 1e-12);
    }
}

#[test]
fn sampler_covers_every_label() {
    let labels = ["A", "B", "C", "D", "E", "F"];
    let mut corpus = Vec::new();
    for i in 0..60 {
        let (a, b) = (labels[i % 6], labels[(i / 6) % 6]);
        corpus.push(Sentence::from_words("x y z w", vec![EntitySpan::new(0, 0, a), EntitySpan::new(2, 2, b)]).unwrap());
    }
    let cfg = SamplerConfig::new(3, 1);
    let mut seen = BTreeSet::new();
    for seed in 0..1000 {
        if let Ok(ep) = sample_episode(&corpus, &cfg, seed) {
            seen.extend(ep.types);
        }
    }
    assert_eq!(seen.len(), labels.len());
}

#[test]
fn orthogonal_prototypes_recover_every_type() {
    for n in 1..6 {
        let c = Array2::from_shape_fn((n, n), |(r, k)| if r == k { 2.0 } else { 0.0 });
        for t in 0..n {
            let u: Vec<f64> = c.row(t).to_vec();
            assert_eq!(argmax(&classify(&u, &c).unwrap()), t);
        }
    }
}
