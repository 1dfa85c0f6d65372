//! Corpus BLEU and paired bootstrap resampling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const SAMPLE_SIZE_GRID: [usize; 4] = [50, 100, 500, 1000];
/// Fraction of resamples at which "A is better" is reported as significant.
pub const SIGNIFICANCE_LEVEL: f64 = 0.95;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{what}: {left} vs {right} sentences")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("no sentences to score")]
    Empty,
    #[error("{0} must be at least 1")]
    ZeroArgument(&'static str),
}

/// Clipped n-gram matches over total candidate n-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Precision {
    pub matches: u64,
    pub total: u64,
}

impl Precision {
    /// `0/0` counts as zero.
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matches as f64 / self.total as f64
        }
    }
}

/// Sufficient statistics for corpus BLEU; sums over sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub precisions: [Precision; MAX_ORDER],
    pub candidate_length: u64,
    pub reference_length: u64,
}

impl BleuStats {
    pub fn sentence(candidate: &Sentence, reference: &Sentence) -> Self {
        let cand = candidate.tokens();
        let refs = reference.tokens();
        let mut precisions = [Precision::default(); MAX_ORDER];
        for (k, p) in precisions.iter_mut().enumerate() {
            let n = k + 1;
            if cand.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            for g in refs.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut cand_counts: HashMap<&[String], u64> = HashMap::new();
            for g in cand.windows(n) {
                *cand_counts.entry(g).or_default() += 1;
            }
            p.total = (cand.len() + 1 - n) as u64;
            p.matches = cand_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        Self {
            precisions,
            candidate_length: cand.len() as u64,
            reference_length: refs.len() as u64,
        }
    }

    pub fn add(&mut self, other: &BleuStats) {
        for (a, b) in self.precisions.iter_mut().zip(&other.precisions) {
            a.matches += b.matches;
            a.total += b.total;
        }
        self.candidate_length += other.candidate_length;
        self.reference_length += other.reference_length;
    }

    pub fn bleu(&self) -> f64 {
        if self.precisions.iter().any(|p| p.matches == 0) {
            return 0.0;
        }
        let mean_log = self
            .precisions
            .iter()
            .map(|p| p.value().ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        brevity_penalty(self.candidate_length, self.reference_length) * mean_log.exp()
    }

    pub fn breakdown(&self) -> BleuBreakdown {
        BleuBreakdown {
            precisions: self.precisions,
            brevity_penalty: brevity_penalty(self.candidate_length, self.reference_length),
            candidate_length: self.candidate_length,
            reference_length: self.reference_length,
            bleu: self.bleu(),
        }
    }
}

/// Corpus BLEU with its components. `bleu` is in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuBreakdown {
    pub precisions: [Precision; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_length: u64,
    pub reference_length: u64,
    pub bleu: f64,
}

impl BleuBreakdown {
    /// BLEU on the 0–100 scale.
    pub fn points(&self) -> f64 {
        self.bleu * 100.0
    }
}

/// `min(1, e^(1 - r/c))`; zero for an empty candidate side.
pub fn brevity_penalty(candidate_length: u64, reference_length: u64) -> f64 {
    if candidate_length == 0 {
        return 0.0;
    }
    if candidate_length >= reference_length {
        return 1.0;
    }
    (1.0 - reference_length as f64 / candidate_length as f64).exp()
}

fn check_lengths(what: &'static str, left: usize, right: usize) -> Result<(), MetricError> {
    if left != right {
        return Err(MetricError::LengthMismatch { what, left, right });
    }
    Ok(())
}

pub fn sentence_stats(candidates: &[Sentence], references: &[Sentence]) -> Result<Vec<BleuStats>, MetricError> {
    check_lengths("candidates vs references", candidates.len(), references.len())?;
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| BleuStats::sentence(c, r))
        .collect())
}

/// Corpus-level BLEU with per-sentence clipping, N = 4, single reference,
/// no smoothing.
pub fn corpus_bleu(candidates: &[Sentence], references: &[Sentence]) -> Result<BleuBreakdown, MetricError> {
    let stats = sentence_stats(candidates, references)?;
    if stats.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = BleuStats::default();
    for s in &stats {
        total.add(s);
    }
    Ok(total.breakdown())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub fraction_a_better: f64,
    pub sample_size: usize,
    pub n_resamples: usize,
    pub rng_seed: u64,
}

impl SignificanceResult {
    pub fn is_significant(&self) -> bool {
        self.fraction_a_better >= SIGNIFICANCE_LEVEL
    }
}

fn sample_bleu(stats: &[BleuStats], sample: &[usize]) -> f64 {
    let mut acc = BleuStats::default();
    for &i in sample {
        acc.add(&stats[i]);
    }
    acc.bleu()
}

/// Share of the given index samples on which system A's corpus BLEU is
/// strictly higher than system B's.
pub fn fraction_a_better<'a>(
    stats_a: &[BleuStats],
    stats_b: &[BleuStats],
    samples: impl IntoIterator<Item = &'a [usize]>,
) -> f64 {
    let (mut wins, mut n) = (0usize, 0usize);
    for sample in samples {
        n += 1;
        if sample_bleu(stats_a, sample) > sample_bleu(stats_b, sample) {
            wins += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        wins as f64 / n as f64
    }
}

/// Index sample for resample `index`: `sample_size` draws with replacement
/// from a ChaCha8 stream keyed by `(rng_seed, index)`.
pub fn resample_indices(rng_seed: u64, index: u64, corpus_size: usize, sample_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(index);
    (0..sample_size).map(|_| rng.gen_range(0..corpus_size)).collect()
}

pub fn paired_bootstrap(
    outputs_a: &[Sentence],
    outputs_b: &[Sentence],
    references: &[Sentence],
    sample_size: usize,
    n_resamples: usize,
    rng_seed: u64,
) -> Result<SignificanceResult, MetricError> {
    check_lengths("system A vs references", outputs_a.len(), references.len())?;
    check_lengths("system B vs references", outputs_b.len(), references.len())?;
    if references.is_empty() {
        return Err(MetricError::Empty);
    }
    if sample_size == 0 {
        return Err(MetricError::ZeroArgument("sample_size"));
    }
    if n_resamples == 0 {
        return Err(MetricError::ZeroArgument("n_resamples"));
    }
    let stats_a = sentence_stats(outputs_a, references)?;
    let stats_b = sentence_stats(outputs_b, references)?;
    let samples: Vec<Vec<usize>> = (0..n_resamples as u64)
        .map(|i| resample_indices(rng_seed, i, references.len(), sample_size))
        .collect();
    let fraction = fraction_a_better(&stats_a, &stats_b, samples.iter().map(Vec::as_slice));
    Ok(SignificanceResult {
        fraction_a_better: fraction,
        sample_size,
        n_resamples,
        rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(text: &str) -> Sentence {
        Sentence::from_tokens(text.split_whitespace())
    }

    fn many(texts: &[&str]) -> Vec<Sentence> {
        texts.iter().map(|t| s(t)).collect()
    }

    #[test]
    fn identity_is_one() {
        let refs = many(&["the cat sat on the mat", "a b c d e"]);
        let b = corpus_bleu(&refs, &refs).unwrap();
        assert_eq!(b.bleu, 1.0);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn zero_overlap_is_zero() {
        let b = corpus_bleu(&many(&["a b c"]), &many(&["x y z"])).unwrap();
        assert_eq!(b.bleu, 0.0);
        assert_eq!(b.precisions[0], Precision { matches: 0, total: 3 });
    }

    #[test]
    fn brevity_penalty_cases() {
        assert_eq!(brevity_penalty(100, 80), 1.0);
        assert_eq!(brevity_penalty(50, 100), (-1.0f64).exp());
        assert!((brevity_penalty(50, 100) - 0.367879).abs() < 1e-6);
        assert_eq!(brevity_penalty(7, 7), 1.0);
        assert_eq!(brevity_penalty(0, 5), 0.0);
    }

    #[test]
    fn clipping_and_partial_overlap() {
        // candidate "the the the the" vs "the cat": unigram matches clipped to 1
        let b = corpus_bleu(&many(&["the the the the"]), &many(&["the cat"])).unwrap();
        assert_eq!(b.precisions[0], Precision { matches: 1, total: 4 });
        assert_eq!(b.bleu, 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            corpus_bleu(&many(&["a"]), &many(&["a", "b"])),
            Err(MetricError::LengthMismatch { .. })
        ));
        assert_eq!(corpus_bleu(&[], &[]), Err(MetricError::Empty));
        let r = many(&["a b"]);
        assert_eq!(paired_bootstrap(&r, &r, &r, 0, 5, 1), Err(MetricError::ZeroArgument("sample_size")));
    }

    #[test]
    fn empty_candidate_adds_no_length() {
        let b = corpus_bleu(&[Sentence::empty(), s("a b c d e")], &many(&["x y", "a b c d e"])).unwrap();
        assert_eq!(b.candidate_length, 5);
        assert_eq!(b.reference_length, 7);
    }

    #[test]
    fn bootstrap_identical_and_dominated() {
        let refs = many(&["a b c d e f", "g h i j k", "l m n o p q r", "s t u v w x"]);
        let garbage = many(&["z z", "y y y", "q", "w w w w"]);
        let same = paired_bootstrap(&refs, &refs, &refs, 10, 200, 3).unwrap();
        assert_eq!(same.fraction_a_better, 0.0);
        let dom = paired_bootstrap(&refs, &garbage, &refs, 10, 200, 3).unwrap();
        assert_eq!(dom.fraction_a_better, 1.0);
        assert!(dom.is_significant());
        assert_eq!(dom, paired_bootstrap(&refs, &garbage, &refs, 10, 200, 3).unwrap());
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in proptest::collection::vec(("[a-d]( [a-d]){0,8}", "[a-d]( [a-d]){0,8}"), 1..6), seed: u64) {
            let cands: Vec<Sentence> = pairs.iter().map(|(c, _)| s(c)).collect();
            let refs: Vec<Sentence> = pairs.iter().map(|(_, r)| s(r)).collect();
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pc: Vec<Sentence> = idx.iter().map(|&i| cands[i].clone()).collect();
            let pr: Vec<Sentence> = idx.iter().map(|&i| refs[i].clone()).collect();
            let a = corpus_bleu(&cands, &refs).unwrap();
            let b = corpus_bleu(&pc, &pr).unwrap();
            prop_assert_eq!(a.precisions, b.precisions);
            prop_assert!((a.bleu - b.bleu).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.bleu));
        }

        #[test]
        fn brevity_penalty_is_monotone(r in 0u64..500, c in 1u64..500) {
            let bp = brevity_penalty(c, r);
            prop_assert!(bp > 0.0 && bp <= 1.0);
            prop_assert!(brevity_penalty(c + 1, r) >= bp);
        }

        #[test]
        fn bootstrap_directions_sum_to_at_most_one(
            data in proptest::collection::vec(("[a-c]( [a-c]){3,8}", "[a-c]( [a-c]){3,8}", "[a-c]( [a-c]){3,8}"), 2..8),
            seed: u64,
        ) {
            let a: Vec<Sentence> = data.iter().map(|x| s(&x.0)).collect();
            let b: Vec<Sentence> = data.iter().map(|x| s(&x.1)).collect();
            let r: Vec<Sentence> = data.iter().map(|x| s(&x.2)).collect();
            let ab = paired_bootstrap(&a, &b, &r, 5, 50, seed).unwrap();
            let ba = paired_bootstrap(&b, &a, &r, 5, 50, seed).unwrap();
            prop_assert!(ab.fraction_a_better + ba.fraction_a_better <= 1.0 + 1e-12);
        }
    }
}
