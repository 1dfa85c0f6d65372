mod common;

use std::collections::BTreeSet;

use backtrans::corpus::{ParallelCorpus, Provenance, Sentence, SentencePair};
use backtrans::model::{BackendConfig, Direction, TrainingSchedule, TranslationModel};
use backtrans::qe::{estimate, select_top_fraction, select_top_n, Fraction, QeScorer, ScoredPair};
use common::small_data;
use proptest::prelude::*;

fn synthetic(n: usize) -> ParallelCorpus {
    let pairs = (0..n)
        .map(|i| SentencePair {
            source: Sentence::from_tokens([format!("s{i}")]),
            target: Sentence::from_tokens([format!("t{i}")]),
            provenance: Provenance::synthetic("backward_0", 0),
        })
        .collect();
    ParallelCorpus::new("syn", pairs).unwrap()
}

fn scored(scores: &[f64]) -> Vec<ScoredPair> {
    estimate(&synthetic(scores.len()), QeScorer::External(scores)).unwrap()
}

fn indices(c: &ParallelCorpus) -> Vec<usize> {
    c.sources().map(|s| s.tokens()[0][1..].parse().unwrap()).collect()
}

#[test]
fn a_third_of_nine_is_three() {
    let s = scored(&[0.1, 0.9, 0.5, 0.3, 0.8, 0.2, 0.7, 0.4, 0.6]);
    let (sel, rest) = select_top_fraction(&s, Fraction::ONE_THIRD, "x");
    assert_eq!(indices(&sel), [1, 4, 6]);
    assert_eq!(rest.len(), 6);
}

#[test]
fn a_third_of_ten_is_the_top_four() {
    let scores = [3.0, -1.0, 7.5, 0.25, 9.0, 2.0, -4.0, 6.0, 1.0, 5.0];
    let (sel, _) = select_top_fraction(&scored(&scores), Fraction::ONE_THIRD, "x");
    let mut order: Vec<usize> = (0..10).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut expected = order[..4].to_vec();
    expected.sort_unstable();
    assert_eq!(indices(&sel), expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn selection_partitions_and_dominates(
        scores in prop::collection::vec(-50.0f64..50.0, 1..60),
        num in 1u64..10,
        extra in 0u64..10,
    ) {
        let fraction = Fraction::new(num, num + extra).unwrap();
        let s = scored(&scores);
        let (sel, rest) = select_top_fraction(&s, fraction, "x");
        let want = ((num as usize * scores.len()) + (num + extra) as usize - 1) / (num + extra) as usize;
        prop_assert_eq!(sel.len(), want);
        let (a, b) = (indices(&sel), indices(&rest));
        let all: BTreeSet<usize> = a.iter().chain(&b).copied().collect();
        prop_assert_eq!(all.len(), scores.len());
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
        let worst_kept = a.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let best_dropped = b.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(worst_kept >= best_dropped);
    }

    #[test]
    fn selection_ignores_input_order(
        scores in prop::collection::btree_set(-1000i32..1000, 1..40),
        n in 0usize..40,
        rot in 0usize..40,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let base = scored(&scores);
        let mut shuffled = base.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (a, _) = select_top_n(&base, n, "x");
        let (b, _) = select_top_n(&shuffled, n, "x");
        prop_assert_eq!(indices(&a), indices(&b));
    }
}

#[test]
fn model_confidence_agrees_with_translation_confidence() {
    let data = small_data(23, 300, 40);
    let mut m = TranslationModel::new("backward_0", Direction::Backward, &BackendConfig::default(), 1);
    let schedule = TrainingSchedule {
        max_steps: 5,
        ..TrainingSchedule::default()
    };
    m.train(&data.authentic, &data.dev, &schedule).unwrap();
    let inputs: Vec<Sentence> = data.mono_target.sentences().to_vec();
    let outputs = m.translate(&inputs).unwrap();
    let pairs = outputs
        .iter()
        .zip(&inputs)
        .map(|((src, _), tgt)| SentencePair {
            source: if src.is_empty() { Sentence::from_tokens(["<unk>"]) } else { src.clone() },
            target: tgt.clone(),
            provenance: Provenance::synthetic("backward_0", 0),
        })
        .collect();
    let corpus = ParallelCorpus::new("syn", pairs).unwrap();
    let scored = estimate(&corpus, QeScorer::ModelConfidence(Some(&m))).unwrap();
    for (s, (out, conf)) in scored.iter().zip(&outputs) {
        if !out.is_empty() {
            assert!((s.score - conf).abs() < 1e-9, "{} vs {}", s.score, conf);
        }
    }
    assert!(estimate(&corpus, QeScorer::ModelConfidence(None)).is_err());
}
