//! Sentence and corpus types, file ingestion, cleaning, splitting, and the
//! synthetic-language testbed.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

mod synthetic;

pub use synthetic::{
    generate_source_monolingual, generate_synthetic_language, OracleParseError, SentenceShape,
    SyntheticLanguageSpec, SyntheticOracle,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line counts differ: source has {source_lines} lines, target has {target_lines}")]
    Alignment {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("{path}: invalid UTF-8 on line {line}")]
    Decode { path: PathBuf, line: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pair {index} has an empty side")]
    EmptySide { index: usize },
    #[error("monolingual sentence {index} is empty")]
    EmptySentence { index: usize },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Options controlling how raw lines are turned into token lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizeOptions {
    pub lowercase: bool,
}

impl Default for TokenizeOptions {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

/// A whitespace-tokenized sentence together with the line it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    tokens: Vec<String>,
    raw: String,
}

impl Sentence {
    /// Tokenizes a raw line: NFC normalization, optional lowercasing, then a
    /// split on unicode whitespace.
    pub fn parse(line: &str, opts: TokenizeOptions) -> Self {
        let normalized: String = line.nfc().collect();
        let normalized = if opts.lowercase {
            normalized.to_lowercase()
        } else {
            normalized
        };
        let tokens = normalized.split_whitespace().map(str::to_owned).collect();
        Self {
            tokens,
            raw: line.to_owned(),
        }
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        debug_assert!(tokens.iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
        let raw = tokens.join(" ");
        Self { tokens, raw }
    }

    pub fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            raw: String::new(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, tok) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(tok)?;
        }
        Ok(())
    }
}

/// Where a sentence pair came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Authentic,
    Synthetic { generator_id: String, iteration: u32 },
}

impl Provenance {
    pub fn synthetic(generator_id: impl Into<String>, iteration: u32) -> Self {
        Provenance::Synthetic {
            generator_id: generator_id.into(),
            iteration,
        }
    }

    pub fn kind(&self) -> ProvenanceKind {
        match self {
            Provenance::Authentic => ProvenanceKind::Authentic,
            Provenance::Synthetic { .. } => ProvenanceKind::Synthetic,
        }
    }

    pub fn is_authentic(&self) -> bool {
        matches!(self, Provenance::Authentic)
    }

    pub fn generator_id(&self) -> Option<&str> {
        match self {
            Provenance::Authentic => None,
            Provenance::Synthetic { generator_id, .. } => Some(generator_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceKind {
    Authentic,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Sentence,
    pub target: Sentence,
    pub provenance: Provenance,
}

/// Which side of a parallel corpus a model reads or writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Source => Side::Target,
            Side::Target => Side::Source,
        }
    }
}

impl SentencePair {
    pub fn side(&self, side: Side) -> &Sentence {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }
}

/// Aligned sentence pairs, each tagged with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    name: String,
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(name: impl Into<String>, pairs: Vec<SentencePair>) -> Result<Self, CorpusError> {
        if let Some(index) = pairs
            .iter()
            .position(|p| p.source.is_empty() || p.target.is_empty())
        {
            return Err(CorpusError::EmptySide { index });
        }
        Ok(Self {
            name: name.into(),
            pairs,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pairs: Vec::new(),
        }
    }

    /// Builds a corpus from two aligned sentence lists with one provenance.
    pub fn from_sides(
        name: impl Into<String>,
        sources: Vec<Sentence>,
        targets: Vec<Sentence>,
        provenance: Provenance,
    ) -> Result<Self, CorpusError> {
        if sources.len() != targets.len() {
            return Err(CorpusError::Alignment {
                source_lines: sources.len(),
                target_lines: targets.len(),
            });
        }
        let pairs = sources
            .into_iter()
            .zip(targets)
            .map(|(source, target)| SentencePair {
                source,
                target,
                provenance: provenance.clone(),
            })
            .collect();
        Self::new(name, pairs)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<SentencePair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn side(&self, side: Side) -> impl Iterator<Item = &Sentence> + '_ {
        self.pairs.iter().map(move |p| p.side(side))
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> + '_ {
        self.side(Side::Source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> + '_ {
        self.side(Side::Target)
    }

    pub fn count_kind(&self, kind: ProvenanceKind) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.provenance.kind() == kind)
            .count()
    }

    pub fn all_kind(&self, kind: ProvenanceKind) -> bool {
        self.pairs.iter().all(|p| p.provenance.kind() == kind)
    }

    /// Pairs at the given indices, in the order given.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self {
            name: name.into(),
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }

    /// The target side as a monolingual corpus.
    pub fn target_side(&self, language_tag: impl Into<String>) -> MonolingualCorpus {
        MonolingualCorpus {
            language_tag: language_tag.into(),
            sentences: self.targets().cloned().collect(),
        }
    }

    pub fn write_files(&self, src_path: &Path, tgt_path: &Path) -> Result<(), CorpusError> {
        write_lines(src_path, self.sources())?;
        write_lines(tgt_path, self.targets())
    }
}

/// Sentences in a single language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonolingualCorpus {
    language_tag: String,
    sentences: Vec<Sentence>,
}

impl MonolingualCorpus {
    pub fn new(language_tag: impl Into<String>, sentences: Vec<Sentence>) -> Result<Self, CorpusError> {
        if let Some(index) = sentences.iter().position(Sentence::is_empty) {
            return Err(CorpusError::EmptySentence { index });
        }
        Ok(Self {
            language_tag: language_tag.into(),
            sentences,
        })
    }

    pub fn language_tag(&self) -> &str {
        &self.language_tag
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            language_tag: self.language_tag.clone(),
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
        }
    }

    pub fn write_file(&self, path: &Path) -> Result<(), CorpusError> {
        write_lines(path, self.sentences.iter())
    }
}

/// Counts emitted when reading corpus files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub dropped: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut lines = Vec::new();
    if bytes.is_empty() {
        return Ok(lines);
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    for (i, chunk) in body.split(|&b| b == b'\n').enumerate() {
        let chunk = chunk.strip_suffix(b"\r").unwrap_or(chunk);
        let line = std::str::from_utf8(chunk).map_err(|_| CorpusError::Decode {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        lines.push(line.to_owned());
    }
    Ok(lines)
}

fn write_lines<'a>(
    path: &Path,
    sentences: impl Iterator<Item = &'a Sentence>,
) -> Result<(), CorpusError> {
    let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for s in sentences {
        writeln!(out, "{s}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn corpus_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a pair of line-aligned files. Pairs where either line is blank are
/// dropped and counted in the returned report.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    provenance: Provenance,
    opts: TokenizeOptions,
) -> Result<(ParallelCorpus, LoadReport), CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::Alignment {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let mut report = LoadReport::default();
    let mut pairs = Vec::with_capacity(src.len());
    for (s, t) in src.iter().zip(&tgt) {
        let source = Sentence::parse(s, opts);
        let target = Sentence::parse(t, opts);
        if source.is_empty() || target.is_empty() {
            report.dropped += 1;
            continue;
        }
        pairs.push(SentencePair {
            source,
            target,
            provenance: provenance.clone(),
        });
    }
    report.loaded = pairs.len();
    log::info!(
        "load_parallel src={} tgt={} loaded={} dropped={}",
        src_path.display(),
        tgt_path.display(),
        report.loaded,
        report.dropped
    );
    let corpus = ParallelCorpus::new(corpus_name(src_path), pairs)?;
    Ok((corpus, report))
}

pub fn load_monolingual(
    path: &Path,
    language_tag: &str,
    opts: TokenizeOptions,
) -> Result<(MonolingualCorpus, LoadReport), CorpusError> {
    let lines = read_lines(path)?;
    let mut report = LoadReport::default();
    let mut sentences = Vec::with_capacity(lines.len());
    for line in &lines {
        let s = Sentence::parse(line, opts);
        if s.is_empty() {
            report.dropped += 1;
        } else {
            sentences.push(s);
        }
    }
    report.loaded = sentences.len();
    log::info!(
        "load_monolingual path={} loaded={} dropped={}",
        path.display(),
        report.loaded,
        report.dropped
    );
    Ok((MonolingualCorpus::new(language_tag, sentences)?, report))
}

/// Length and length-ratio filter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanOptions {
    pub min_len: usize,
    pub max_len: usize,
    pub max_ratio: f64,
}

impl Default for CleanOptions {
    fn default() -> Self {
        Self {
            min_len: 1,
            max_len: 175,
            max_ratio: 9.0,
        }
    }
}

impl CleanOptions {
    pub fn new(min_len: usize, max_len: usize, max_ratio: f64) -> Result<Self, CorpusError> {
        if min_len < 1 || min_len > max_len {
            return Err(CorpusError::Config(format!(
                "need 1 <= min_len <= max_len, got {min_len}..{max_len}"
            )));
        }
        if !(max_ratio >= 1.0) {
            return Err(CorpusError::Config(format!(
                "max_ratio must be at least 1, got {max_ratio}"
            )));
        }
        Ok(Self {
            min_len,
            max_len,
            max_ratio,
        })
    }

    fn keeps(&self, pair: &SentencePair) -> bool {
        let (a, b) = (pair.source.len(), pair.target.len());
        let in_range = |n: usize| n >= self.min_len && n <= self.max_len;
        if !in_range(a) || !in_range(b) {
            return false;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        hi as f64 <= self.max_ratio * lo as f64
    }
}

/// Keeps pairs whose sides are within the length bounds and whose length
/// ratio does not exceed `max_ratio`. Order is preserved.
pub fn clean(corpus: &ParallelCorpus, opts: &CleanOptions) -> ParallelCorpus {
    ParallelCorpus {
        name: corpus.name.clone(),
        pairs: corpus
            .pairs
            .iter()
            .filter(|p| opts.keeps(p))
            .cloned()
            .collect(),
    }
}

/// Shuffled train/dev/test partition. Each part keeps the input's relative
/// order.
pub fn split(
    corpus: &ParallelCorpus,
    dev_fraction: f64,
    test_fraction: f64,
    rng_seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus), CorpusError> {
    let valid = |f: f64| (0.0..1.0).contains(&f);
    if !valid(dev_fraction) || !valid(test_fraction) || dev_fraction + test_fraction >= 1.0 {
        return Err(CorpusError::Config(format!(
            "split fractions must be in [0, 1) with a sum below 1, got dev={dev_fraction} test={test_fraction}"
        )));
    }
    let n = corpus.len();
    let n_dev = (dev_fraction * n as f64).round() as usize;
    let n_test = ((test_fraction * n as f64).round() as usize).min(n - n_dev);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let mut dev: Vec<usize> = order[..n_dev].to_vec();
    let mut test: Vec<usize> = order[n_dev..n_dev + n_test].to_vec();
    let mut train: Vec<usize> = order[n_dev + n_test..].to_vec();
    dev.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    let name = corpus.name();
    Ok((
        corpus.subset(format!("{name}.train"), &train),
        corpus.subset(format!("{name}.dev"), &dev),
        corpus.subset(format!("{name}.test"), &test),
    ))
}

/// Pairs of `a` followed by pairs of `b`.
pub fn concat(a: &ParallelCorpus, b: &ParallelCorpus) -> ParallelCorpus {
    let mut pairs = Vec::with_capacity(a.len() + b.len());
    pairs.extend_from_slice(&a.pairs);
    pairs.extend_from_slice(&b.pairs);
    ParallelCorpus {
        name: a.name.clone(),
        pairs,
    }
}

/// Set of sentence texts, used for disjointness checks.
pub(crate) fn text_set<'a>(sentences: impl Iterator<Item = &'a Sentence>) -> HashSet<String> {
    sentences.map(Sentence::text).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(src: &str, tgt: &str) -> SentencePair {
        SentencePair {
            source: Sentence::parse(src, TokenizeOptions::default()),
            target: Sentence::parse(tgt, TokenizeOptions::default()),
            provenance: Provenance::Authentic,
        }
    }

    fn words(n: usize) -> String {
        vec!["w"; n].join(" ")
    }

    #[test]
    fn tokenizes_with_nfc_and_lowercase() {
        let s = Sentence::parse("  Cafe\u{301}  OK\tgo ", TokenizeOptions::default());
        assert_eq!(s.tokens(), &["café", "ok", "go"]);
        let keep = Sentence::parse("Hello World", TokenizeOptions { lowercase: false });
        assert_eq!(keep.text(), "Hello World");
    }

    #[test]
    fn load_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        fs::write(&s, "a b\nc\nd e f\n").unwrap();
        fs::write(&t, "x\ny z\nw\n").unwrap();
        let (c, r) = load_parallel(&s, &t, Provenance::Authentic, TokenizeOptions::default()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(r, LoadReport { loaded: 3, dropped: 0 });
        assert_eq!(c.name(), "a");
    }

    #[test]
    fn load_rejects_mismatched_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        fs::write(&s, "1\n2\n3\n4\n5\n").unwrap();
        fs::write(&t, "1\n2\n3\n4\n").unwrap();
        let err = load_parallel(&s, &t, Provenance::Authentic, TokenizeOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn load_drops_blank_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        let src: Vec<String> = (0..10).map(|i| if i == 4 { "  ".into() } else { format!("s{i}") }).collect();
        let tgt: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        fs::write(&s, src.join("\n")).unwrap();
        fs::write(&t, tgt.join("\n")).unwrap();
        let (c, r) = load_parallel(&s, &t, Provenance::Authentic, TokenizeOptions::default()).unwrap();
        assert_eq!(c.len(), 9);
        assert_eq!(r.dropped, 1);
    }

    #[test]
    fn load_reports_bad_utf8_line() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        fs::write(&s, b"ok\nfine\n\xff\xfe\n").unwrap();
        fs::write(&t, "a\nb\nc\n").unwrap();
        match load_parallel(&s, &t, Provenance::Authentic, TokenizeOptions::default()) {
            Err(CorpusError::Decode { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn clean_length_and_ratio_rules() {
        let c = ParallelCorpus::new(
            "c",
            vec![pair(&words(3), &words(200)), pair(&words(2), &words(20)), pair(&words(4), &words(5))],
        )
        .unwrap();
        let opts = CleanOptions::new(1, 175, 9.0).unwrap();
        let kept = clean(&c, &opts);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.pairs()[0].source.len(), 4);

        let fine = ParallelCorpus::new("c", vec![pair("a b", "c d e"), pair("x", "y")]).unwrap();
        assert_eq!(clean(&fine, &opts), fine);
        assert!(CleanOptions::new(0, 5, 2.0).is_err());
        assert!(CleanOptions::new(3, 2, 2.0).is_err());
        assert!(CleanOptions::new(1, 2, 0.5).is_err());
    }

    fn numbered(n: usize) -> ParallelCorpus {
        ParallelCorpus::new("n", (0..n).map(|i| pair(&format!("s{i}"), &format!("t{i}"))).collect())
            .unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = numbered(100);
        let (tr, dv, te) = split(&c, 0.1, 0.1, 7).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (80, 10, 10));
        let again = split(&c, 0.1, 0.1, 7).unwrap();
        assert_eq!((tr, dv, te), again);
        assert!(matches!(split(&c, 0.6, 0.6, 7), Err(CorpusError::Config(_))));
        assert!(split(&c, -0.1, 0.1, 7).is_err());
    }

    #[test]
    fn concat_preserves_provenance() {
        let a = numbered(3);
        let b = ParallelCorpus::new(
            "b",
            (0..2)
                .map(|i| SentencePair {
                    provenance: Provenance::synthetic("m", 0),
                    ..pair(&format!("x{i}"), "y")
                })
                .collect(),
        )
        .unwrap();
        let ab = concat(&a, &b);
        assert_eq!(ab.len(), 5);
        assert_eq!(ab.count_kind(ProvenanceKind::Authentic), 3);
        assert_eq!(ab.count_kind(ProvenanceKind::Synthetic), 2);
        assert_eq!(concat(&a, &ParallelCorpus::empty("e")), a);
    }

    #[test]
    fn corpus_rejects_empty_sides() {
        let bad = SentencePair {
            source: Sentence::empty(),
            target: Sentence::from_tokens(["a"]),
            provenance: Provenance::Authentic,
        };
        assert!(matches!(ParallelCorpus::new("x", vec![bad]), Err(CorpusError::EmptySide { index: 0 })));
        assert!(MonolingualCorpus::new("en", vec![Sentence::empty()]).is_err());
    }

    fn arb_corpus() -> impl Strategy<Value = ParallelCorpus> {
        proptest::collection::vec((1usize..30, 1usize..30, any::<bool>()), 0..40).prop_map(|spec| {
            let pairs = spec
                .into_iter()
                .enumerate()
                .map(|(i, (a, b, syn))| SentencePair {
                    source: Sentence::from_tokens((0..a).map(|j| format!("s{i}_{j}"))),
                    target: Sentence::from_tokens((0..b).map(|j| format!("t{i}_{j}"))),
                    provenance: if syn { Provenance::synthetic("g", 1) } else { Provenance::Authentic },
                })
                .collect();
            ParallelCorpus::new("p", pairs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(c in arb_corpus(), lo in 1usize..5, span in 0usize..20, ratio in 1.0f64..4.0) {
            let opts = CleanOptions::new(lo, lo + span, ratio).unwrap();
            let once = clean(&c, &opts);
            prop_assert_eq!(clean(&once, &opts), once);
        }

        #[test]
        fn split_is_a_partition(c in arb_corpus(), dev in 0.0f64..0.45, test in 0.0f64..0.45, seed: u64) {
            let (tr, dv, te) = split(&c, dev, test, seed).unwrap();
            let mut all: Vec<SentencePair> = tr.pairs().iter().chain(dv.pairs()).chain(te.pairs()).cloned().collect();
            let mut orig = c.pairs().to_vec();
            let key = |p: &SentencePair| p.source.text();
            all.sort_by_key(key);
            orig.sort_by_key(key);
            prop_assert_eq!(&all, &orig);
            for kind in [ProvenanceKind::Authentic, ProvenanceKind::Synthetic] {
                prop_assert_eq!(
                    tr.count_kind(kind) + dv.count_kind(kind) + te.count_kind(kind),
                    c.count_kind(kind)
                );
            }
        }
    }
}
