//! Quality estimation of synthetic pairs and best-fraction selection.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ParallelCorpus, SentencePair, SyntheticOracle};
use crate::model::{ModelError, TranslationModel};

#[derive(Debug, Error)]
pub enum QeError {
    #[error("model-confidence scoring needs the model that produced the pairs")]
    MissingModel,
    #[error("cannot score an empty corpus")]
    Empty,
    #[error("expected {expected} scores, found {found}")]
    ScoreCount { expected: usize, found: usize },
    #[error("scores line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("score for pair {index} is not finite")]
    NonFinite { index: usize },
    #[error("fraction must lie in (0, 1], got {0}")]
    Fraction(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Exact ratio in (0, 1]; parsed from `a/b` or a decimal like `0.25`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fraction {
    numerator: u64,
    denominator: u64,
}

impl Fraction {
    pub const ONE: Fraction = Fraction { numerator: 1, denominator: 1 };
    pub const ONE_THIRD: Fraction = Fraction { numerator: 1, denominator: 3 };

    pub fn new(numerator: u64, denominator: u64) -> Result<Self, QeError> {
        if numerator == 0 || denominator == 0 || numerator > denominator {
            return Err(QeError::Fraction(format!("{numerator}/{denominator}")));
        }
        Ok(Self { numerator, denominator })
    }

    /// `ceil(self * n)`.
    pub fn ceil_of(&self, n: usize) -> usize {
        let n = n as u128;
        let (a, b) = (self.numerator as u128, self.denominator as u128);
        ((a * n + b - 1) / b) as usize
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    pub fn is_one(&self) -> bool {
        self.numerator == self.denominator
    }
}

impl Default for Fraction {
    fn default() -> Self {
        Self::ONE_THIRD
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

impl FromStr for Fraction {
    type Err = QeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || QeError::Fraction(s.to_owned());
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Fraction::new(a, b).map_err(|_| bad());
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || int.len() > 1 {
            return Err(bad());
        }
        let denominator = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numerator = int * denominator + frac_val;
        let g = gcd(numerator, denominator);
        if g == 0 {
            return Err(bad());
        }
        Fraction::new(numerator / g, denominator / g).map_err(|_| bad())
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl TryFrom<String> for Fraction {
    type Error = QeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> Self {
        f.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: SentencePair,
    /// Higher is better.
    pub score: f64,
    pub original_index: usize,
}

/// How synthetic pairs are scored.
#[derive(Debug, Clone, Copy)]
pub enum QeScorer<'a> {
    /// Mean per-token log-probability under the model that produced the
    /// synthetic side; the model reads its own input side of each pair.
    ModelConfidence(Option<&'a TranslationModel>),
    /// Negative token edit distance between the source side and the exact
    /// translation of the target side. Only available on generated data.
    Oracle(&'a SyntheticOracle),
    /// Precomputed scores, one per pair in corpus order.
    External(&'a [f64]),
}

/// Scores every pair, keeping corpus order.
pub fn estimate(pairs: &ParallelCorpus, scorer: QeScorer<'_>) -> Result<Vec<ScoredPair>, QeError> {
    if pairs.is_empty() {
        return Err(QeError::Empty);
    }
    let scores: Vec<f64> = match scorer {
        QeScorer::ModelConfidence(None) => return Err(QeError::MissingModel),
        QeScorer::ModelConfidence(Some(model)) => {
            let (i, o) = (model.direction().input_side(), model.direction().output_side());
            pairs
                .pairs()
                .par_iter()
                .map(|p| model.score_pair(p.side(i), p.side(o)))
                .collect::<Result<_, _>>()?
        }
        QeScorer::Oracle(oracle) => pairs
            .pairs()
            .par_iter()
            .map(|p| {
                let exact = oracle.translate_target(&p.target).tokens().to_vec();
                -(strsim::generic_levenshtein(&p.source.tokens().to_vec(), &exact) as f64)
            })
            .collect(),
        QeScorer::External(scores) => {
            if scores.len() != pairs.len() {
                return Err(QeError::ScoreCount {
                    expected: pairs.len(),
                    found: scores.len(),
                });
            }
            scores.to_vec()
        }
    };
    scores
        .into_iter()
        .zip(pairs.pairs())
        .enumerate()
        .map(|(index, (score, pair))| {
            if !score.is_finite() {
                return Err(QeError::NonFinite { index });
            }
            Ok(ScoredPair {
                pair: pair.clone(),
                score,
                original_index: index,
            })
        })
        .collect()
}

/// Keeps the `n` best pairs (ties to the lower original index). Both parts
/// come back in original-index order.
pub fn select_top_n(scored: &[ScoredPair], n: usize, name: &str) -> (ParallelCorpus, ParallelCorpus) {
    let mut ranked: Vec<&ScoredPair> = scored.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.original_index.cmp(&b.original_index)));
    let cut = n.min(ranked.len());
    let mut chosen: Vec<&ScoredPair> = ranked[..cut].to_vec();
    let mut rest: Vec<&ScoredPair> = ranked[cut..].to_vec();
    chosen.sort_by_key(|s| s.original_index);
    rest.sort_by_key(|s| s.original_index);
    let build = |part: Vec<&ScoredPair>, suffix: &str| {
        let pairs = part.into_iter().map(|s| s.pair.clone()).collect();
        ParallelCorpus::new(format!("{name}.{suffix}"), pairs).expect("pairs came from a valid corpus")
    };
    (build(chosen, "selected"), build(rest, "rest"))
}

/// Keeps the `ceil(fraction * N)` best pairs.
pub fn select_top_fraction(scored: &[ScoredPair], fraction: Fraction, name: &str) -> (ParallelCorpus, ParallelCorpus) {
    select_top_n(scored, fraction.ceil_of(scored.len()), name)
}

/// Reads `index<TAB>score` lines; every index in `0..expected` must appear
/// exactly once.
pub fn parse_external_scores(text: &str, expected: usize) -> Result<Vec<f64>, QeError> {
    let mut scores: Vec<Option<f64>> = vec![None; expected];
    let mut found = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: &str| QeError::Parse {
            line: line_no,
            msg: msg.to_owned(),
        };
        let (idx, score) = line.split_once('\t').ok_or_else(|| parse("expected `index<TAB>score`"))?;
        let idx: usize = idx.trim().parse().map_err(|_| parse("index is not a non-negative integer"))?;
        let score: f64 = score.trim().parse().map_err(|_| parse("score is not a number"))?;
        if !score.is_finite() {
            return Err(QeError::NonFinite { index: idx });
        }
        let slot = scores.get_mut(idx).ok_or_else(|| parse("index beyond the corpus"))?;
        if slot.replace(score).is_some() {
            return Err(parse("index given twice"));
        }
        found += 1;
    }
    if found != expected {
        return Err(QeError::ScoreCount { expected, found });
    }
    Ok(scores.into_iter().map(|s| s.expect("all indices seen")).collect())
}

pub fn load_external_scores(path: &Path, expected: usize) -> Result<Vec<f64>, QeError> {
    let text = std::fs::read_to_string(path).map_err(|source| QeError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_external_scores(&text, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, Sentence};

    fn scored(scores: &[f64]) -> Vec<ScoredPair> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredPair {
                pair: SentencePair {
                    source: Sentence::from_tokens([format!("s{i}")]),
                    target: Sentence::from_tokens([format!("t{i}")]),
                    provenance: Provenance::synthetic("m", 0),
                },
                score: s,
                original_index: i,
            })
            .collect()
    }

    #[test]
    fn fractions_parse_exactly() {
        assert_eq!("1/3".parse::<Fraction>().unwrap(), Fraction::ONE_THIRD);
        assert_eq!("0.5".parse::<Fraction>().unwrap(), Fraction::new(1, 2).unwrap());
        assert_eq!("1".parse::<Fraction>().unwrap(), Fraction::ONE);
        for bad in ["0", "2/1", "1/0", "-0.5", "abc", "1.5", ""] {
            assert!(bad.parse::<Fraction>().is_err(), "{bad}");
        }
        assert_eq!(Fraction::ONE_THIRD.ceil_of(9), 3);
        assert_eq!(Fraction::ONE_THIRD.ceil_of(10), 4);
        assert_eq!(Fraction::ONE_THIRD.ceil_of(0), 0);
    }

    #[test]
    fn ties_go_to_lower_index_and_order_is_kept() {
        let s = scored(&[1.0, 5.0, 5.0, 2.0, 5.0]);
        let (sel, rest) = select_top_n(&s, 2, "x");
        let names: Vec<String> = sel.sources().map(|x| x.text()).collect();
        assert_eq!(names, ["s1", "s2"]);
        let names: Vec<String> = rest.sources().map(|x| x.text()).collect();
        assert_eq!(names, ["s0", "s3", "s4"]);
    }

    #[test]
    fn full_fraction_selects_everything() {
        let s = scored(&[3.0, 1.0, 2.0]);
        let (sel, rest) = select_top_fraction(&s, Fraction::ONE, "x");
        assert_eq!(sel.len(), 3);
        assert!(rest.is_empty());
    }

    #[test]
    fn external_scores_file() {
        assert_eq!(parse_external_scores("1\t0.5\n0\t-2\n", 2).unwrap(), vec![-2.0, 0.5]);
        assert!(matches!(parse_external_scores("0\t1\n0\t2\n", 2), Err(QeError::Parse { line: 2, .. })));
        assert!(matches!(parse_external_scores("0\t1\n", 2), Err(QeError::ScoreCount { .. })));
        assert!(matches!(parse_external_scores("0\tNaN\n", 1), Err(QeError::NonFinite { .. })));
        assert!(matches!(parse_external_scores("5\t1\n", 1), Err(QeError::Parse { .. })));
    }

    #[test]
    fn missing_model_is_a_config_error() {
        let c = ParallelCorpus::new(
            "c",
            vec![SentencePair {
                source: Sentence::from_tokens(["a"]),
                target: Sentence::from_tokens(["b"]),
                provenance: Provenance::Authentic,
            }],
        )
        .unwrap();
        assert!(matches!(estimate(&c, QeScorer::ModelConfidence(None)), Err(QeError::MissingModel)));
    }
}
