//! Byte-pair encoding and vocabulary construction.
//!
//! Segmentation follows the usual MT convention: words are split into
//! characters with an end-of-word marker attached to the last one, merges are
//! learned greedily by pair frequency, and every non-final unit of a word is
//! written with a trailing `@@` separator.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{ParallelCorpus, Sentence};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const RESERVED: [&str; 3] = [UNK, BOS, EOS];

pub const SEPARATOR: &str = "@@";
pub const END_OF_WORD: &str = "</w>";
pub const CODEC_VERSION_LINE: &str = "#version: 0.2";
pub const DEFAULT_MERGES: usize = 10_000;
pub const DEFAULT_VOCAB_SIZE: usize = 8_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BpeError {
    #[error("no tokens to learn from")]
    EmptyCorpus,
    #[error("vocabulary size {0} leaves no room for the reserved tokens")]
    VocabTooSmall(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn parse_err(line: usize, msg: impl Into<String>) -> BpeError {
    BpeError::Parse {
        line,
        msg: msg.into(),
    }
}

type Pair = (String, String);

/// Ordered merge rules.
#[derive(Debug, Clone)]
pub struct BpeCodec {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
}

impl PartialEq for BpeCodec {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
    }
}

impl Eq for BpeCodec {}

impl BpeCodec {
    pub fn from_merges(merges: Vec<Pair>) -> Result<Self, BpeError> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(parse_err(i + 2, format!("duplicate merge `{} {}`", m.0, m.1)));
            }
        }
        Ok(Self { merges, ranks })
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn end_of_word_marker(&self) -> &str {
        END_OF_WORD
    }

    pub fn separator(&self) -> &str {
        SEPARATOR
    }

    /// Splits one word into units; the end-of-word marker is stripped from
    /// the last unit.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            symbols = merge_symbols(&symbols, l, r);
        }
        if let Some(last) = symbols.last_mut() {
            if let Some(stripped) = last.strip_suffix(END_OF_WORD) {
                *last = stripped.to_owned();
            }
        }
        symbols
    }

    pub fn apply(&self, sentence: &Sentence) -> Sentence {
        let mut cache = HashMap::new();
        self.apply_cached(sentence, &mut cache)
    }

    fn apply_cached(&self, sentence: &Sentence, cache: &mut HashMap<String, Vec<String>>) -> Sentence {
        let mut out = Vec::with_capacity(sentence.len() * 2);
        for word in sentence.tokens() {
            let units = cache
                .entry(word.clone())
                .or_insert_with(|| self.segment_word(word));
            let last = units.len() - 1;
            for (i, u) in units.iter().enumerate() {
                if i < last {
                    out.push(format!("{u}{SEPARATOR}"));
                } else {
                    out.push(u.clone());
                }
            }
        }
        Sentence::from_tokens(out)
    }

    /// Applies the codec to many sentences, sharing a word cache.
    pub fn apply_all<'a>(&self, sentences: impl IntoIterator<Item = &'a Sentence>) -> Vec<Sentence> {
        let mut cache = HashMap::new();
        sentences
            .into_iter()
            .map(|s| self.apply_cached(s, &mut cache))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 * self.merges.len() + 16);
        out.push_str(CODEC_VERSION_LINE);
        out.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, BpeError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.starts_with("#version:") => {}
            _ => return Err(parse_err(1, "missing `#version:` header")),
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_owned(), r.to_owned()))
                }
                _ => return Err(parse_err(i + 2, "expected `left right`")),
            }
        }
        Self::from_merges(merges)
    }
}

/// Joins separator-suffixed units back into words.
pub fn undo_bpe(sentence: &Sentence) -> Sentence {
    let mut words = Vec::with_capacity(sentence.len());
    let mut pending = String::new();
    for tok in sentence.tokens() {
        match tok.strip_suffix(SEPARATOR) {
            Some(head) => pending.push_str(head),
            None => {
                pending.push_str(tok);
                words.push(std::mem::take(&mut pending));
            }
        }
    }
    if !pending.is_empty() {
        words.push(pending);
    }
    Sentence::from_tokens(words)
}

pub fn apply_bpe(codec: &BpeCodec, sentence: &Sentence) -> Sentence {
    codec.apply(sentence)
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

/// Merges every non-overlapping occurrence of `(left, right)`, scanning left
/// to right.
fn merge_symbols(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Word-type frequencies over all tokens of the given sentences.
pub fn word_frequencies<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> BTreeMap<String, u64> {
    let mut freq = BTreeMap::new();
    for s in sentences {
        for t in s.tokens() {
            *freq.entry(t.clone()).or_insert(0) += 1;
        }
    }
    freq
}

struct PairStats {
    counts: HashMap<Pair, i64>,
    occurs_in: HashMap<Pair, HashSet<usize>>,
    heap: BinaryHeap<(i64, Reverse<Pair>)>,
}

impl PairStats {
    fn add(&mut self, pair: &Pair, delta: i64, word: usize) {
        let c = self.counts.entry(pair.clone()).or_insert(0);
        *c += delta;
        if delta > 0 {
            self.occurs_in.entry(pair.clone()).or_default().insert(word);
        }
        if *c > 0 {
            self.heap.push((*c, Reverse(pair.clone())));
        }
    }

    /// Most frequent pair, ties broken by the lexicographically smallest
    /// `(left, right)`.
    fn best(&mut self) -> Option<(Pair, i64)> {
        while let Some((c, Reverse(pair))) = self.heap.pop() {
            if self.counts.get(&pair) == Some(&c) {
                return Some((pair, c));
            }
        }
        None
    }
}

/// Greedy frequency-driven merge learning over word types.
///
/// Stops after `num_merges` merges or once no pair occurs at least twice.
pub fn learn_bpe<'a>(
    sentences: impl IntoIterator<Item = &'a Sentence>,
    num_merges: usize,
) -> Result<BpeCodec, BpeError> {
    let freq = word_frequencies(sentences);
    if freq.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, i64)> = freq
        .into_iter()
        .map(|(w, f)| (initial_symbols(&w), f as i64))
        .collect();
    let mut stats = PairStats {
        counts: HashMap::new(),
        occurs_in: HashMap::new(),
        heap: BinaryHeap::new(),
    };
    for (idx, (symbols, f)) in words.iter().enumerate() {
        for w in symbols.windows(2) {
            stats.add(&(w[0].clone(), w[1].clone()), *f, idx);
        }
    }

    let mut merges = Vec::with_capacity(num_merges.min(1 << 16));
    while merges.len() < num_merges {
        let Some((pair, count)) = stats.best() else { break };
        if count < 2 {
            break;
        }
        let mut affected: Vec<usize> = stats
            .occurs_in
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for idx in affected {
            let (symbols, f) = &words[idx];
            let f = *f;
            if !symbols.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                continue;
            }
            let merged = merge_symbols(symbols, &pair.0, &pair.1);
            for w in symbols.windows(2) {
                stats.add(&(w[0].clone(), w[1].clone()), -f, idx);
            }
            for w in merged.windows(2) {
                stats.add(&(w[0].clone(), w[1].clone()), f, idx);
            }
            words[idx].0 = merged;
        }
        merges.push(pair);
    }
    BpeCodec::from_merges(merges)
}

/// One codec over all four sides of the authentic and synthetic corpora.
pub fn learn_joint_bpe(
    authentic: &ParallelCorpus,
    synthetic: &ParallelCorpus,
    num_merges: usize,
) -> Result<BpeCodec, BpeError> {
    let all = authentic
        .sources()
        .chain(authentic.targets())
        .chain(synthetic.sources())
        .chain(synthetic.targets());
    learn_bpe(all, num_merges)
}

/// Frequency-ranked token inventory with reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<(String, u64)>,
    max_size: usize,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>, max_size: usize) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        Self {
            entries,
            max_size,
            index,
        }
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.index[UNK])
    }

    pub fn token(&self, id: usize) -> &str {
        &self.entries[id].0
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }

    pub fn bos_id(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos_id(&self) -> usize {
        self.index[EOS]
    }

    /// `token<TAB>frequency` per line, in entry order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, f) in &self.entries {
            let _ = writeln!(out, "{t}\t{f}");
        }
        out
    }

    pub fn parse(text: &str, max_size: usize) -> Result<Self, BpeError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut prev = u64::MAX;
        for (i, line) in text.lines().enumerate() {
            let (tok, freq) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(i + 1, "expected `token<TAB>frequency`"))?;
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(parse_err(i + 1, "token must be non-empty without whitespace"));
            }
            let freq: u64 = freq
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad frequency `{freq}`")))?;
            if freq > prev {
                return Err(parse_err(i + 1, "frequencies must be non-increasing"));
            }
            if !seen.insert(tok.to_owned()) {
                return Err(parse_err(i + 1, format!("duplicate token `{tok}`")));
            }
            prev = freq;
            entries.push((tok.to_owned(), freq));
        }
        if let Some(missing) = RESERVED.iter().find(|r| !seen.contains(**r)) {
            return Err(parse_err(entries.len() + 1, format!("reserved token `{missing}` missing")));
        }
        if entries.len() > max_size {
            return Err(parse_err(entries.len(), format!("more than {max_size} entries")));
        }
        Ok(Self::from_entries(entries, max_size))
    }
}

/// Keeps the `max_size - 3` most frequent tokens (ties in lexicographic
/// order) followed by the reserved tokens with frequency zero.
pub fn build_vocab<'a>(
    sentences: impl IntoIterator<Item = &'a Sentence>,
    max_size: usize,
) -> Result<Vocabulary, BpeError> {
    if max_size < RESERVED.len() + 1 {
        return Err(BpeError::VocabTooSmall(max_size));
    }
    let freq = word_frequencies(sentences);
    let mut ranked: Vec<(String, u64)> = freq
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    ranked.extend(RESERVED.iter().map(|r| (r.to_string(), 0)));
    Ok(Vocabulary::from_entries(ranked, max_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, SentencePair};
    use proptest::prelude::*;

    fn sent(s: &str) -> Sentence {
        Sentence::from_tokens(s.split_whitespace())
    }

    /// Recounts every pair from scratch at each step.
    fn brute_force_merges(text: &[&str], num_merges: usize) -> Vec<Pair> {
        let mut freq: BTreeMap<String, u64> = BTreeMap::new();
        for line in text {
            for w in line.split_whitespace() {
                *freq.entry(w.to_owned()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, u64)> = freq
            .into_iter()
            .map(|(w, f)| {
                let mut s: Vec<String> = w.chars().map(String::from).collect();
                s.last_mut().unwrap().push_str("</w>");
                (s, f)
            })
            .collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut counts: BTreeMap<Pair, u64> = BTreeMap::new();
            for (s, f) in &words {
                for i in 0..s.len().saturating_sub(1) {
                    *counts.entry((s[i].clone(), s[i + 1].clone())).or_default() += f;
                }
            }
            // BTreeMap iterates pairs in ascending order; keep the first maximum.
            let mut best: Option<(&Pair, u64)> = None;
            for (p, &c) in &counts {
                if best.map_or(true, |(_, bc)| c > bc) {
                    best = Some((p, c));
                }
            }
            let Some((p, c)) = best else { break };
            if c < 2 {
                break;
            }
            let p = p.clone();
            for (s, _) in &mut words {
                let mut out = Vec::new();
                let mut i = 0;
                while i < s.len() {
                    if i + 1 < s.len() && s[i] == p.0 && s[i + 1] == p.1 {
                        out.push(format!("{}{}", p.0, p.1));
                        i += 2;
                    } else {
                        out.push(s[i].clone());
                        i += 1;
                    }
                }
                *s = out;
            }
            merges.push(p);
        }
        merges
    }

    fn learn(text: &[&str], n: usize) -> BpeCodec {
        let sents: Vec<Sentence> = text.iter().map(|t| sent(t)).collect();
        learn_bpe(&sents, n).unwrap()
    }

    #[test]
    fn zero_merges_gives_characters() {
        let codec = learn(&["ab ab"], 0);
        assert!(codec.merges().is_empty());
        assert_eq!(codec.apply(&sent("ab")).text(), "a@@ b");
    }

    #[test]
    fn low_lowest_matches_brute_force() {
        let text = ["low low low lowest"];
        let oracle = brute_force_merges(&text, 100);
        let codec = learn(&text, 100);
        assert_eq!(codec.merges(), oracle.as_slice());
        // frozen from the oracle: l+o first, then lo+w</w>
        assert_eq!(oracle[0], ("l".into(), "o".into()));
        assert_eq!(oracle[1], ("lo".into(), "w</w>".into()));
        assert_eq!(oracle.len(), 2);
    }

    #[test]
    fn lowest_segmentation_replays_merges() {
        let codec = learn(&["low low low lowest"], 100);
        // by hand: l o w e s t</w> -> lo w e s t</w>; (lo, w</w>) never fires
        assert_eq!(codec.apply(&sent("lowest")).text(), "lo@@ w@@ e@@ s@@ t");
        assert_eq!(codec.apply(&sent("low")).text(), "low");
    }

    #[test]
    fn single_character_word_learns_nothing() {
        assert!(learn(&["a a a a"], 50).merges().is_empty());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert_eq!(learn_bpe(std::iter::empty(), 5), Err(BpeError::EmptyCorpus));
    }

    #[test]
    fn micro_corpora_match_oracle() {
        let corpora: [&[&str]; 3] = [
            &["the cat sat on the mat", "the hat"],
            &["aaa aaaa aa a", "abab baba"],
            &["newer newest wider widest lower lowest", "new wide low"],
        ];
        for text in corpora {
            let codec = learn(text, 40);
            assert_eq!(codec.merges(), brute_force_merges(text, 40).as_slice(), "{text:?}");
        }
    }

    fn parallel(pairs: &[(&str, &str)], prov: Provenance) -> ParallelCorpus {
        ParallelCorpus::new(
            "p",
            pairs
                .iter()
                .map(|(s, t)| SentencePair {
                    source: sent(s),
                    target: sent(t),
                    provenance: prov.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn joint_bpe_identities() {
        let auth = parallel(&[("lower lowest", "newer newest"), ("low", "new")], Provenance::Authentic);
        let syn = parallel(&[("slow slower", "renew")], Provenance::synthetic("m", 0));
        let empty = ParallelCorpus::empty("e");
        let alone = learn_bpe(auth.sources().chain(auth.targets()), 30).unwrap();
        assert_eq!(learn_joint_bpe(&auth, &empty, 30).unwrap(), alone);
        assert_eq!(
            learn_joint_bpe(&auth, &syn, 30).unwrap(),
            learn_joint_bpe(&syn, &auth, 30).unwrap()
        );
    }

    #[test]
    fn joint_bpe_on_disjoint_alphabets() {
        let auth = parallel(&[("abab ab", "cdcd cd")], Provenance::Authentic);
        let syn = parallel(&[("xyxy xy xy", "zwzw")], Provenance::synthetic("m", 0));
        let joint = learn_joint_bpe(&auth, &syn, 20).unwrap();
        let oracle = brute_force_merges(&["abab ab", "cdcd cd", "xyxy xy xy", "zwzw"], 20);
        assert_eq!(joint.merges(), oracle.as_slice());
    }

    #[test]
    fn undo_examples() {
        assert_eq!(undo_bpe(&sent("a@@ b c")).text(), "ab c");
        assert!(undo_bpe(&Sentence::empty()).is_empty());
        let plain = sent("plain words here");
        assert_eq!(undo_bpe(&plain), plain);
    }

    #[test]
    fn codec_text_roundtrip_and_errors() {
        let codec = learn(&["low low low lowest newer wider"], 10);
        let text = codec.to_text();
        assert!(text.starts_with("#version: 0.2\n"));
        assert_eq!(BpeCodec::parse(&text).unwrap(), codec);
        assert!(BpeCodec::parse("l o\n").is_err());
        assert!(BpeCodec::parse("#version: 0.2\nl o x\n").is_err());
        assert!(BpeCodec::parse("#version: 0.2\nl o\nl o\n").is_err());
    }

    #[test]
    fn vocab_capacity_and_ties() {
        let small = build_vocab(&[sent("a b c a")], 10).unwrap();
        assert_eq!(small.len(), 6);
        assert!(RESERVED.iter().all(|r| small.contains(r)));

        let many: Vec<Sentence> = (0..100)
            .map(|i| Sentence::from_tokens(vec![format!("t{i:03}"); 100 - i]))
            .collect();
        let capped = build_vocab(&many, 10).unwrap();
        assert_eq!(capped.len(), 10);
        let kept: Vec<&str> = capped.entries()[..7].iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(kept, ["t000", "t001", "t002", "t003", "t004", "t005", "t006"]);
        assert_eq!(capped.id("t099"), capped.unk_id());

        let ties = build_vocab(&[sent("c b a")], 10).unwrap();
        let order: Vec<&str> = ties.entries()[..3].iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(order, ["a", "b", "c"]);
        assert_eq!(build_vocab(&[sent("a")], 3), Err(BpeError::VocabTooSmall(3)));
    }

    #[test]
    fn vocab_text_roundtrip() {
        let v = build_vocab(&[sent("x y y z z z")], 8).unwrap();
        assert_eq!(Vocabulary::parse(&v.to_text(), 8).unwrap(), v);
        assert!(Vocabulary::parse("a\t1\nb\t2\n", 8).is_err());
        assert!(Vocabulary::parse("a\t2\n", 8).is_err());
    }

    fn arb_sentence() -> impl Strategy<Value = Sentence> {
        proptest::collection::vec("[a-eé]{1,8}", 0..10).prop_map(Sentence::from_tokens)
    }

    proptest! {
        #[test]
        fn roundtrip(train in proptest::collection::vec(arb_sentence(), 1..8), s in arb_sentence(), n in 0usize..40) {
            prop_assume!(train.iter().any(|t| !t.is_empty()));
            let codec = learn_bpe(&train, n).unwrap();
            prop_assert_eq!(undo_bpe(&codec.apply(&s)), s);
        }

        #[test]
        fn merge_budget_is_monotone(train in proptest::collection::vec(arb_sentence(), 1..8), m in 0usize..30, extra in 0usize..30) {
            prop_assume!(train.iter().any(|t| !t.is_empty()));
            let small = learn_bpe(&train, m).unwrap();
            let big = learn_bpe(&train, m + extra).unwrap();
            prop_assert!(big.merges().starts_with(small.merges()));
        }

        #[test]
        fn units_come_from_chars_or_merges(train in proptest::collection::vec(arb_sentence(), 1..8), n in 0usize..40) {
            prop_assume!(train.iter().any(|t| !t.is_empty()));
            let codec = learn_bpe(&train, n).unwrap();
            let mut alphabet: HashSet<String> = HashSet::new();
            for s in &train {
                for w in s.tokens() {
                    alphabet.extend(w.chars().map(String::from));
                }
            }
            let merged: HashSet<String> = codec
                .merges()
                .iter()
                .map(|(l, r)| format!("{l}{r}").trim_end_matches(END_OF_WORD).to_owned())
                .collect();
            let mut inventory = HashSet::new();
            for s in &train {
                for u in codec.apply(s).tokens() {
                    let u = u.trim_end_matches(SEPARATOR).to_owned();
                    prop_assert!(alphabet.contains(&u) || merged.contains(&u), "{u}");
                    inventory.insert(u);
                }
            }
            prop_assert!(inventory.len() <= alphabet.len() + codec.merges().len());
        }
    }
}
