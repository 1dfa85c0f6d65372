//! A toy language pair with a known exact translation function.
//!
//! Source sentences come from a sparse bigram Markov chain over a Zipfian
//! vocabulary. The target language is a bijective relabeling of the source
//! words followed by a block reordering, so every clean sentence has exactly
//! one correct translation in each direction.

use std::collections::{HashMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    text_set, CorpusError, MonolingualCorpus, ParallelCorpus, Provenance, Sentence, SentencePair,
};

const SOURCE_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const SOURCE_NUCLEI: &[&str] = &["a", "e", "i", "o", "u"];
const TARGET_NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "y"];
const TARGET_CODAS: &[&str] = &["c", "h", "j", "k", "l", "m", "n", "q", "r", "s", "t", "x"];

const STREAM_LEXICON: u64 = 1;
const STREAM_PARALLEL: u64 = 2;
const STREAM_MONO: u64 = 3;
const STREAM_SOURCE_MONO: u64 = 4;

/// Sentence-length and Markov-chain shape of the generated language.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceShape {
    pub min_len: usize,
    pub max_len: usize,
    /// Number of distinct successors per word in the bigram chain.
    pub branching: usize,
    pub zipf_exponent: f64,
}

impl Default for SentenceShape {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 12,
            branching: 8,
            zipf_exponent: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLanguageSpec {
    pub vocab_size_src: usize,
    pub vocab_size_tgt: usize,
    pub reorder_window: usize,
    pub noise_rate: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub shape: SentenceShape,
}

impl Default for SyntheticLanguageSpec {
    fn default() -> Self {
        Self {
            vocab_size_src: 2000,
            vocab_size_tgt: 2000,
            reorder_window: 0,
            noise_rate: 0.1,
            rng_seed: 1,
            shape: SentenceShape::default(),
        }
    }
}

impl SyntheticLanguageSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Config(m));
        if self.vocab_size_src < 2 || self.vocab_size_tgt < 2 {
            return fail(format!(
                "vocabulary sizes must be at least 2, got {} and {}",
                self.vocab_size_src, self.vocab_size_tgt
            ));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return fail(format!("noise_rate must be in [0, 0.5), got {}", self.noise_rate));
        }
        let s = &self.shape;
        if s.min_len < 1 || s.min_len > s.max_len {
            return fail(format!("sentence lengths need 1 <= min <= max, got {}..{}", s.min_len, s.max_len));
        }
        if s.branching < 1 {
            return fail("branching must be at least 1".into());
        }
        if !(s.zipf_exponent >= 0.0 && s.zipf_exponent.is_finite()) {
            return fail(format!("zipf_exponent must be finite and non-negative, got {}", s.zipf_exponent));
        }
        Ok(())
    }

    /// Word types shared by the bijection: the smaller of the two sizes.
    pub fn word_count(&self) -> usize {
        self.vocab_size_src.min(self.vocab_size_tgt)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }
}

/// Bijective base-n spelling of `id` over a syllable inventory.
fn spell(mut id: usize, syllables: &[String]) -> String {
    let n = syllables.len();
    let mut parts = Vec::new();
    loop {
        parts.push(syllables[id % n].as_str());
        if id < n {
            break;
        }
        id = id / n - 1;
    }
    parts.reverse();
    parts.concat()
}

fn product(a: &[&str], b: &[&str]) -> Vec<String> {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| format!("{x}{y}")))
        .collect()
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(exponent)).collect()
}

/// The exact translation function of a generated language pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracle {
    source_words: Vec<String>,
    target_words: Vec<String>,
    reorder_window: usize,
    to_target: HashMap<String, usize>,
    to_source: HashMap<String, usize>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleParseError {
    #[error("missing or malformed header line")]
    Header,
    #[error("line {0}: expected `source<TAB>target`")]
    Entry(usize),
    #[error("line {line}: word `{word}` appears twice")]
    Duplicate { line: usize, word: String },
}

pub const ORACLE_HEADER: &str = "#oracle v1 reorder_window=";

impl SyntheticOracle {
    pub fn new(
        source_words: Vec<String>,
        target_words: Vec<String>,
        reorder_window: usize,
    ) -> Result<Self, OracleParseError> {
        assert_eq!(source_words.len(), target_words.len());
        let mut to_target = HashMap::with_capacity(source_words.len());
        let mut to_source = HashMap::with_capacity(source_words.len());
        for (i, (s, t)) in source_words.iter().zip(&target_words).enumerate() {
            if to_target.insert(s.clone(), i).is_some() {
                return Err(OracleParseError::Duplicate { line: i + 2, word: s.clone() });
            }
            if to_source.insert(t.clone(), i).is_some() {
                return Err(OracleParseError::Duplicate { line: i + 2, word: t.clone() });
            }
        }
        Ok(Self {
            source_words,
            target_words,
            reorder_window,
            to_target,
            to_source,
        })
    }

    pub fn reorder_window(&self) -> usize {
        self.reorder_window
    }

    pub fn len(&self) -> usize {
        self.source_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_words.is_empty()
    }

    pub fn source_words(&self) -> &[String] {
        &self.source_words
    }

    pub fn target_words(&self) -> &[String] {
        &self.target_words
    }

    /// Reverses consecutive blocks of `reorder_window + 1` positions. The
    /// permutation is its own inverse.
    fn reorder<T>(&self, tokens: &mut [T]) {
        for block in tokens.chunks_mut(self.reorder_window + 1) {
            block.reverse();
        }
    }

    fn map_with(&self, s: &Sentence, lookup: &HashMap<String, usize>, out: &[String]) -> Sentence {
        if s.is_empty() {
            return Sentence::empty();
        }
        let mut toks: Vec<String> = s
            .tokens()
            .iter()
            .map(|t| lookup.get(t).map_or_else(|| crate::subword::UNK.to_owned(), |&i| out[i].clone()))
            .collect();
        self.reorder(&mut toks);
        Sentence::from_tokens(toks)
    }

    pub fn translate_source(&self, s: &Sentence) -> Sentence {
        self.map_with(s, &self.to_target, &self.target_words)
    }

    pub fn translate_target(&self, s: &Sentence) -> Sentence {
        self.map_with(s, &self.to_source, &self.source_words)
    }

    /// Text form: a header carrying the reorder window, then one
    /// `source<TAB>target` line per word.
    pub fn to_text(&self) -> String {
        let mut out = format!("{ORACLE_HEADER}{}\n", self.reorder_window);
        for (s, t) in self.source_words.iter().zip(&self.target_words) {
            out.push_str(s);
            out.push('\t');
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, OracleParseError> {
        let mut lines = text.lines();
        let window = lines
            .next()
            .and_then(|h| h.strip_prefix(ORACLE_HEADER))
            .and_then(|w| w.trim().parse::<usize>().ok())
            .ok_or(OracleParseError::Header)?;
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || OracleParseError::Entry(i + 2);
            let (s, t) = line.split_once('\t').ok_or_else(bad)?;
            let well_formed = |w: &str| !w.is_empty() && !w.contains(char::is_whitespace);
            if !well_formed(s) || !well_formed(t) {
                return Err(bad());
            }
            src.push(s.to_owned());
            tgt.push(t.to_owned());
        }
        Self::new(src, tgt, window)
    }
}

struct Generator {
    oracle: SyntheticOracle,
    start: WeightedIndex<f64>,
    successors: Vec<(Vec<usize>, WeightedIndex<f64>)>,
    shape: SentenceShape,
}

impl Generator {
    fn build(spec: &SyntheticLanguageSpec) -> Self {
        let n = spec.word_count();
        let shape = spec.shape;
        let mut rng = spec.rng(STREAM_LEXICON);
        let src_syl = product(SOURCE_ONSETS, SOURCE_NUCLEI);
        let tgt_syl = product(TARGET_NUCLEI, TARGET_CODAS);
        let source_words: Vec<String> = (0..n).map(|i| spell(i, &src_syl)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let target_words: Vec<String> = perm.iter().map(|&j| spell(j, &tgt_syl)).collect();
        let oracle = SyntheticOracle::new(source_words, target_words, spec.reorder_window)
            .expect("spelling is injective");

        let global = zipf_weights(n, shape.zipf_exponent);
        let start = WeightedIndex::new(&global).expect("positive weights");
        let slot_weights = zipf_weights(shape.branching, 1.0);
        let successors = (0..n)
            .map(|_| {
                let next: Vec<usize> = (0..shape.branching).map(|_| start.sample(&mut rng)).collect();
                (next, WeightedIndex::new(&slot_weights).expect("positive weights"))
            })
            .collect();
        Self {
            oracle,
            start,
            successors,
            shape,
        }
    }

    fn source_sentence(&self, rng: &mut ChaCha8Rng) -> Sentence {
        let len = rng.gen_range(self.shape.min_len..=self.shape.max_len);
        let mut w = self.start.sample(rng);
        let mut toks = Vec::with_capacity(len);
        toks.push(self.oracle.source_words[w].clone());
        for _ in 1..len {
            let (next, dist) = &self.successors[w];
            w = next[dist.sample(rng)];
            toks.push(self.oracle.source_words[w].clone());
        }
        Sentence::from_tokens(toks)
    }

    fn add_noise(&self, s: Sentence, rate: f64, rng: &mut ChaCha8Rng) -> Sentence {
        if rate == 0.0 {
            return s;
        }
        let n = self.oracle.len();
        let toks: Vec<String> = s
            .tokens()
            .iter()
            .map(|t| {
                if rng.gen_bool(rate) {
                    self.oracle.target_words[rng.gen_range(0..n)].clone()
                } else {
                    t.clone()
                }
            })
            .collect();
        Sentence::from_tokens(toks)
    }

    fn monolingual(
        &self,
        count: usize,
        rng: &mut ChaCha8Rng,
        exclude: &HashSet<String>,
        map: impl Fn(&Sentence) -> Sentence,
        tag: &str,
    ) -> Result<MonolingualCorpus, CorpusError> {
        let mut sentences = Vec::with_capacity(count);
        let budget = count.saturating_mul(1000).max(10_000);
        let mut attempts = 0usize;
        while sentences.len() < count {
            attempts += 1;
            if attempts > budget {
                return Err(CorpusError::Config(format!(
                    "could not draw {count} monolingual sentences disjoint from the parallel data"
                )));
            }
            let s = map(&self.source_sentence(rng));
            if !exclude.contains(&s.text()) {
                sentences.push(s);
            }
        }
        MonolingualCorpus::new(tag, sentences)
    }
}

/// Generates an authentic parallel corpus, target-side monolingual text
/// disjoint from the parallel targets, and the oracle that produced both.
///
/// Noise (random target-word substitution at `noise_rate`) is applied to the
/// parallel targets only; monolingual sentences are clean.
pub fn generate_synthetic_language(
    spec: &SyntheticLanguageSpec,
    n_parallel: usize,
    n_mono: usize,
) -> Result<(ParallelCorpus, MonolingualCorpus, SyntheticOracle), CorpusError> {
    spec.validate()?;
    if n_parallel == 0 || n_mono == 0 {
        return Err(CorpusError::Config("corpus sizes must be positive".into()));
    }
    let gen = Generator::build(spec);
    let mut rng = spec.rng(STREAM_PARALLEL);
    let mut pairs = Vec::with_capacity(n_parallel);
    let mut exclude = HashSet::new();
    for _ in 0..n_parallel {
        let source = gen.source_sentence(&mut rng);
        let clean = gen.oracle.translate_source(&source);
        let target = gen.add_noise(clean.clone(), spec.noise_rate, &mut rng);
        exclude.insert(clean.text());
        exclude.insert(target.text());
        pairs.push(SentencePair {
            source,
            target,
            provenance: Provenance::Authentic,
        });
    }
    let parallel = ParallelCorpus::new("synthetic", pairs)?;
    let mut rng = spec.rng(STREAM_MONO);
    let mono = gen.monolingual(n_mono, &mut rng, &exclude, |s| gen.oracle.translate_source(s), "tgt")?;
    Ok((parallel, mono, gen.oracle))
}

/// Source-language monolingual text for the same language pair, disjoint from
/// the sources of `parallel`.
pub fn generate_source_monolingual(
    spec: &SyntheticLanguageSpec,
    n: usize,
    parallel: &ParallelCorpus,
) -> Result<MonolingualCorpus, CorpusError> {
    spec.validate()?;
    let gen = Generator::build(spec);
    let exclude = text_set(parallel.sources());
    let mut rng = spec.rng(STREAM_SOURCE_MONO);
    gen.monolingual(n, &mut rng, &exclude, Sentence::clone, "src")
}
