//! Word-translation backend: a lexical table trained by expectation
//! maximization plus an add-alpha bigram language model over the output side.
//!
//! Continued training (fine-tuning) keeps the expected counts of earlier
//! phases as a prior on the table, scaled by `prior_weight`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::subword::UNK;

use super::ModelError;

/// String-to-id table that serializes as its word list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Interner {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Interner {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }
}

impl From<Interner> for Vec<String> {
    fn from(i: Interner) -> Self {
        i.words
    }
}

impl Interner {
    pub fn get(&self, w: &str) -> Option<u32> {
        self.index.get(w).copied()
    }

    pub fn intern(&mut self, w: &str) -> u32 {
        if let Some(id) = self.index.get(w) {
            return *id;
        }
        let id = self.words.len() as u32;
        self.words.push(w.to_owned());
        self.index.insert(w.to_owned(), id);
        id
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// False when two ids spell the same word.
    pub(crate) fn is_consistent(&self) -> bool {
        self.index.len() == self.words.len()
    }
}

/// Sparse row-stochastic table in compressed-row layout; row `f` holds
/// `t(e | f)` for the output ids `cols[offsets[f]..offsets[f+1]]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LexicalTable {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    probs: Vec<f64>,
}

impl LexicalTable {
    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn row(&self, f: u32) -> (&[u32], &[f64]) {
        let f = f as usize;
        if f + 1 >= self.offsets.len() {
            return (&[], &[]);
        }
        let (a, b) = (self.offsets[f], self.offsets[f + 1]);
        (&self.cols[a..b], &self.probs[a..b])
    }

    pub fn prob(&self, f: u32, e: u32) -> f64 {
        let (cols, probs) = self.row(f);
        cols.binary_search(&e).map_or(0.0, |k| probs[k])
    }

    fn slot(&self, f: u32, e: u32) -> Option<usize> {
        let f = f as usize;
        let (a, b) = (self.offsets[f], self.offsets[f + 1]);
        self.cols[a..b].binary_search(&e).ok().map(|k| a + k)
    }

    fn slot_checked(&self, f: u32, e: u32) -> Option<usize> {
        if (f as usize) + 1 >= self.offsets.len() {
            return None;
        }
        self.slot(f, e)
    }

    fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut probs = Vec::new();
        offsets.push(0);
        for row in rows {
            for (e, p) in row {
                cols.push(e);
                probs.push(p);
            }
            offsets.push(cols.len());
        }
        Self { offsets, cols, probs }
    }

    fn to_rows(&self) -> Vec<Vec<(u32, f64)>> {
        (0..self.rows() as u32)
            .map(|f| {
                let (c, p) = self.row(f);
                c.iter().copied().zip(p.iter().copied()).collect()
            })
            .collect()
    }

    /// Same values laid out on a (super-)structure `shape`.
    fn align_to(&self, shape: &LexicalTable) -> Vec<f64> {
        let mut out = vec![0.0; shape.cols.len()];
        for f in 0..shape.rows() as u32 {
            let (a, b) = (shape.offsets[f as usize], shape.offsets[f as usize + 1]);
            for k in a..b {
                out[k] = self.prob(f, shape.cols[k]);
            }
        }
        out
    }

    /// Rescales every row to sum to one; empty-mass rows are left as is.
    fn normalize_rows(&mut self) {
        for f in 0..self.rows() {
            let (a, b) = (self.offsets[f], self.offsets[f + 1]);
            let sum: f64 = self.probs[a..b].iter().sum();
            if sum > 0.0 {
                for p in &mut self.probs[a..b] {
                    *p /= sum;
                }
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|f| self.probs[self.offsets[f]..self.offsets[f + 1]].iter().sum())
            .collect()
    }
}

/// Bigram counts over output ids; id `u32::MAX` stands for sentence start.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<(u32, u32, f64)>", into = "Vec<(u32, u32, f64)>")]
pub struct BigramCounts {
    pairs: HashMap<(u32, u32), f64>,
    context: HashMap<u32, f64>,
    unigrams: HashMap<u32, f64>,
    total: f64,
}

pub const START: u32 = u32::MAX;

impl From<Vec<(u32, u32, f64)>> for BigramCounts {
    fn from(v: Vec<(u32, u32, f64)>) -> Self {
        let mut c = BigramCounts::default();
        for (a, b, n) in v {
            c.add(a, b, n);
        }
        c
    }
}

impl From<BigramCounts> for Vec<(u32, u32, f64)> {
    fn from(c: BigramCounts) -> Self {
        let mut v: Vec<(u32, u32, f64)> = c.pairs.into_iter().map(|((a, b), n)| (a, b, n)).collect();
        v.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        v
    }
}

impl BigramCounts {
    fn add(&mut self, prev: u32, next: u32, n: f64) {
        *self.pairs.entry((prev, next)).or_insert(0.0) += n;
        *self.context.entry(prev).or_insert(0.0) += n;
        *self.unigrams.entry(next).or_insert(0.0) += n;
        self.total += n;
    }

    fn add_sentence(&mut self, ids: &[u32]) {
        let mut prev = START;
        for &w in ids {
            self.add(prev, w, 1.0);
            prev = w;
        }
    }

    fn count(&self, prev: u32, next: u32) -> f64 {
        self.pairs.get(&(prev, next)).copied().unwrap_or(0.0)
    }

    fn context_total(&self, prev: u32) -> f64 {
        self.context.get(&prev).copied().unwrap_or(0.0)
    }

    fn unigram(&self, word: u32) -> f64 {
        self.unigrams.get(&word).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatSettings {
    /// Exponent on the language-model factor when decoding.
    pub lm_weight: f64,
    /// Add-alpha smoothing of the bigram model.
    pub lm_alpha: f64,
    /// Scale on expected counts carried into the next training phase.
    pub prior_weight: f64,
    /// Share of uniform mass mixed into each row when a new phase starts,
    /// so that newly co-occurring words can acquire probability.
    pub phase_smoothing: f64,
    /// Decoding ignores candidates whose probability is below this share of
    /// the best candidate in the row.
    pub decode_prune: f64,
    /// Most candidates kept per input position when decoding.
    pub max_candidates: usize,
    pub decoder: Decoder,
}

/// Search over the monotone one-word-per-word lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    /// Left-to-right argmax with left context only.
    Greedy,
    /// Exact best path under table and language-model scores.
    #[default]
    Viterbi,
}

impl Default for StatSettings {
    fn default() -> Self {
        Self {
            lm_weight: 1.0,
            lm_alpha: 0.1,
            prior_weight: 1.0,
            phase_smoothing: 0.1,
            decode_prune: 1e-4,
            max_candidates: 16,
            decoder: Decoder::Viterbi,
        }
    }
}

/// One phase's training data mapped to ids, with precomputed table slots.
#[derive(Debug, Clone, Default)]
struct PhaseData {
    pending: Vec<(Vec<String>, Vec<String>)>,
    inputs: Vec<Vec<u32>>,
    outputs: Vec<Vec<u32>>,
    /// Per pair, `slots[j * m + i]` is the table slot of (input i, output j).
    slots: Vec<Vec<usize>>,
    started: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatModel {
    pub settings: StatSettings,
    input_vocab: Interner,
    output_vocab: Interner,
    table: LexicalTable,
    /// Counts carried from finished phases, aligned to `table`.
    prior: Vec<f64>,
    /// Expected counts from the latest E-step, aligned to `table`.
    last_counts: Vec<f64>,
    lm: BigramCounts,
    trained: bool,
    #[serde(skip)]
    phase: Option<PhaseData>,
}

impl PartialEq for StatModel {
    fn eq(&self, other: &Self) -> bool {
        self.settings == other.settings
            && self.input_vocab == other.input_vocab
            && self.output_vocab == other.output_vocab
            && self.table == other.table
            && self.prior == other.prior
            && self.last_counts == other.last_counts
            && self.lm == other.lm
            && self.trained == other.trained
    }
}

impl StatModel {
    /// Checks that deserialized parts fit together, so that a loaded model
    /// cannot index out of bounds later.
    pub(crate) fn check_structure(&self) -> Result<(), String> {
        let st = &self.settings;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !st.lm_weight.is_finite() || !(st.lm_alpha > 0.0 && st.lm_alpha.is_finite()) {
            return Err("lm_weight must be finite and lm_alpha positive".into());
        }
        if !(st.prior_weight >= 0.0 && st.prior_weight.is_finite()) || !unit(st.phase_smoothing) || !unit(st.decode_prune) {
            return Err("prior_weight, phase_smoothing or decode_prune out of range".into());
        }
        if st.max_candidates == 0 {
            return Err("max_candidates must be positive".into());
        }
        if !self.input_vocab.is_consistent() || !self.output_vocab.is_consistent() {
            return Err("duplicate vocabulary entries".into());
        }
        let t = &self.table;
        if t.cols.len() != t.probs.len() {
            return Err("table columns and probabilities differ in length".into());
        }
        if t.offsets.is_empty() {
            if !t.cols.is_empty() {
                return Err("table without row offsets".into());
            }
        } else {
            if t.offsets[0] != 0 || *t.offsets.last().expect("non-empty") != t.cols.len() {
                return Err("row offsets do not span the table".into());
            }
            if t.offsets.windows(2).any(|w| w[0] > w[1]) {
                return Err("row offsets decrease".into());
            }
            if t.rows() > self.input_vocab.len() {
                return Err("more rows than input words".into());
            }
        }
        let n_out = self.output_vocab.len() as u32;
        for f in 0..t.rows() as u32 {
            let (cols, probs) = t.row(f);
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&e| e >= n_out) {
                return Err(format!("row {f} has unsorted or unknown output ids"));
            }
            if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(format!("row {f} has an invalid probability"));
            }
        }
        for (name, v) in [("prior", &self.prior), ("last_counts", &self.last_counts)] {
            if !v.is_empty() && v.len() != t.cols.len() {
                return Err(format!("{name} is not aligned with the table"));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(format!("{name} holds an invalid count"));
            }
        }
        for (&(a, b), &n) in &self.lm.pairs {
            if (a != START && a >= n_out) || b >= n_out || !(n.is_finite() && n >= 0.0) {
                return Err("language-model counts refer to unknown words".into());
            }
        }
        Ok(())
    }

    pub fn new(settings: StatSettings) -> Self {
        Self {
            settings,
            input_vocab: Interner::default(),
            output_vocab: Interner::default(),
            table: LexicalTable::default(),
            prior: Vec::new(),
            last_counts: Vec::new(),
            lm: BigramCounts::default(),
            trained: false,
            phase: None,
        }
    }

    pub fn table(&self) -> &LexicalTable {
        &self.table
    }

    pub fn input_vocab(&self) -> &Interner {
        &self.input_vocab
    }

    pub fn output_vocab(&self) -> &Interner {
        &self.output_vocab
    }

    /// Copy of the parameters without the pending phase data.
    pub fn snapshot(&self) -> StatModel {
        StatModel {
            settings: self.settings,
            input_vocab: self.input_vocab.clone(),
            output_vocab: self.output_vocab.clone(),
            table: self.table.clone(),
            prior: self.prior.clone(),
            last_counts: self.last_counts.clone(),
            lm: self.lm.clone(),
            trained: self.trained,
            phase: None,
        }
    }

    /// `t(output | input)` by word.
    pub fn translation_prob(&self, input: &str, output: &str) -> f64 {
        match (self.input_vocab.get(input), self.output_vocab.get(output)) {
            (Some(f), Some(e)) => self.table.prob(f, e),
            _ => 0.0,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Records the data for the next phase. Nothing about the model changes
    /// until the first step runs.
    pub fn begin_phase(&mut self, pairs: &[(&Sentence, &Sentence)]) {
        self.phase = Some(PhaseData {
            pending: pairs
                .iter()
                .map(|(a, b)| (a.tokens().to_vec(), b.tokens().to_vec()))
                .collect(),
            ..PhaseData::default()
        });
    }

    pub fn end_phase(&mut self) {
        self.phase = None;
    }

    /// Commits the pending phase: carries counts into the prior, extends the
    /// table with the new co-occurrences and adds the output bigrams.
    fn start_phase(&mut self) {
        let mut phase = self.phase.take().expect("begin_phase before step");
        let was_trained = self.trained;
        // unknown-word placeholders carry no lexical evidence
        for (inp, out) in std::mem::take(&mut phase.pending) {
            let known = |w: &&String| w.as_str() != UNK;
            if !inp.iter().any(|w| known(&w)) || !out.iter().any(|w| known(&w)) {
                continue;
            }
            phase.inputs.push(inp.iter().filter(known).map(|w| self.input_vocab.intern(w)).collect());
            phase.outputs.push(out.iter().filter(known).map(|w| self.output_vocab.intern(w)).collect());
        }

        let n_rows = self.input_vocab.len();
        let mut rows: Vec<Vec<u32>> = (0..n_rows as u32)
            .map(|f| self.table.row(f).0.to_vec())
            .collect();
        for (inp, out) in phase.inputs.iter().zip(&phase.outputs) {
            for &f in inp {
                rows[f as usize].extend_from_slice(out);
            }
        }
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        let shape = LexicalTable::from_rows(
            rows.iter()
                .map(|r| r.iter().map(|&e| (e, 0.0)).collect())
                .collect(),
        );

        let mut prior = if self.prior.is_empty() {
            vec![0.0; shape.cols.len()]
        } else {
            self.aligned(&self.prior, &shape)
        };
        if !self.last_counts.is_empty() {
            let carried = self.aligned(&self.last_counts, &shape);
            for (p, c) in prior.iter_mut().zip(carried) {
                *p += self.settings.prior_weight * c;
            }
        }

        let old = self.table.align_to(&shape);
        let mut table = shape;
        let smoothing = if was_trained { self.settings.phase_smoothing } else { 1.0 };
        for f in 0..table.rows() {
            let (a, b) = (table.offsets[f], table.offsets[f + 1]);
            let width = (b - a) as f64;
            for k in a..b {
                table.probs[k] = (1.0 - smoothing) * old[k] + smoothing / width;
            }
        }
        table.normalize_rows();

        phase.slots = phase
            .inputs
            .iter()
            .zip(&phase.outputs)
            .map(|(inp, out)| {
                let mut s = Vec::with_capacity(inp.len() * out.len());
                for &e in out {
                    for &f in inp {
                        s.push(table.slot(f, e).expect("co-occurrence present"));
                    }
                }
                s
            })
            .collect();

        for out in &phase.outputs {
            self.lm.add_sentence(out);
        }
        self.table = table;
        self.prior = prior;
        self.last_counts = Vec::new();
        phase.started = true;
        self.phase = Some(phase);
        self.trained = true;
    }

    /// `values` (aligned to the current table) laid out on `shape`.
    fn aligned(&self, values: &[f64], shape: &LexicalTable) -> Vec<f64> {
        let mut holder = self.table.clone();
        holder.probs = values.to_vec();
        holder.align_to(shape)
    }

    /// One EM iteration over the phase data. Returns the negative mean
    /// per-sentence log-likelihood before the update.
    pub fn step(&mut self) -> Result<f64, ModelError> {
        if !self.phase.as_ref().is_some_and(|p| p.started) {
            self.start_phase();
        }
        let phase = self.phase.as_ref().expect("phase started");
        let mut counts = vec![0.0; self.table.cols.len()];
        let mut log_lik = 0.0;
        for ((inp, out), slots) in phase.inputs.iter().zip(&phase.outputs).zip(&phase.slots) {
            let m = inp.len();
            for j in 0..out.len() {
                let row = &slots[j * m..(j + 1) * m];
                let denom: f64 = row.iter().map(|&k| self.table.probs[k]).sum();
                if !(denom > 0.0) || !denom.is_finite() {
                    return Err(ModelError::NonFinite("alignment normalizer"));
                }
                log_lik += (denom / m as f64).ln();
                for &k in row {
                    counts[k] += self.table.probs[k] / denom;
                }
            }
        }
        let n = phase.inputs.len().max(1) as f64;
        for f in 0..self.table.rows() {
            let (a, b) = (self.table.offsets[f], self.table.offsets[f + 1]);
            let sum: f64 = (a..b).map(|k| self.prior[k] + counts[k]).sum();
            // rows untouched by this phase and without prior keep their values
            if sum > 0.0 {
                for k in a..b {
                    self.table.probs[k] = (self.prior[k] + counts[k]) / sum;
                }
            }
        }
        self.last_counts = counts;
        let loss = -log_lik / n;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite("log-likelihood"));
        }
        Ok(loss)
    }

    /// One plain EM iteration on `pairs`: expected counts under the current
    /// table, normalized per row. No prior and no smoothing are involved;
    /// an untrained model starts from uniform rows over co-occurring words.
    pub fn em_update(&self, pairs: &[(&Sentence, &Sentence)]) -> Result<StatModel, ModelError> {
        let mut next = self.snapshot();
        if !next.trained {
            next.begin_phase(pairs);
            next.start_phase();
            next.phase = None;
            next.prior = vec![0.0; next.table.cols.len()];
        }
        let mut counts = vec![0.0; next.table.cols.len()];
        for (inp, out) in pairs {
            let fs: Vec<Option<u32>> = inp.tokens().iter().map(|w| next.input_vocab.get(w)).collect();
            for e in out.tokens() {
                let Some(e) = next.output_vocab.get(e) else { continue };
                let slots: Vec<usize> = fs
                    .iter()
                    .filter_map(|f| f.and_then(|f| next.table.slot_checked(f, e)))
                    .collect();
                let denom: f64 = slots.iter().map(|&k| next.table.probs[k]).sum();
                if denom > 0.0 {
                    for k in slots {
                        counts[k] += next.table.probs[k] / denom;
                    }
                } else if !denom.is_finite() {
                    return Err(ModelError::NonFinite("alignment normalizer"));
                }
            }
        }
        for f in 0..next.table.rows() {
            let (a, b) = (next.table.offsets[f], next.table.offsets[f + 1]);
            let sum: f64 = counts[a..b].iter().sum();
            if sum > 0.0 {
                for k in a..b {
                    next.table.probs[k] = counts[k] / sum;
                }
            }
        }
        next.last_counts = counts;
        Ok(next)
    }

    /// Training-data log-likelihood `sum log p(output | input)` under the
    /// alignment model, without the length term.
    pub fn log_likelihood(&self, pairs: &[(&Sentence, &Sentence)]) -> f64 {
        let mut total = 0.0;
        for (inp, out) in pairs {
            let fs: Vec<Option<u32>> = inp.tokens().iter().map(|w| self.input_vocab.get(w)).collect();
            let m = fs.len() as f64;
            for e in out.tokens() {
                let e = self.output_vocab.get(e);
                let s: f64 = fs
                    .iter()
                    .map(|f| match (f, e) {
                        (Some(f), Some(e)) => self.table.prob(*f, e),
                        _ => 0.0,
                    })
                    .sum();
                total += (s / m).ln();
            }
        }
        total
    }

    fn lm_logprob(&self, prev: u32, next: u32) -> f64 {
        let v = self.output_vocab.len().max(1) as f64;
        let a = self.settings.lm_alpha;
        ((self.lm.count(prev, next) + a) / (self.lm.context_total(prev) + a * v)).ln()
    }

    fn unigram_logprob(&self, word: u32) -> f64 {
        let v = self.output_vocab.len().max(1) as f64;
        let a = self.settings.lm_alpha;
        ((self.lm.unigram(word) + a) / (self.lm.total + a * v)).ln()
    }

    fn unk_logprob(&self) -> f64 {
        -(self.output_vocab.len().max(2) as f64).ln()
    }

    /// Language-model score of `next` after `prev`. The table already
    /// carries each output word's overall frequency, so the model
    /// contributes only its context gain over the unigram estimate; at
    /// weight 1 decoding maximizes the noisy-channel score.
    fn transition(&self, prev: u32, next: u32) -> f64 {
        self.settings.lm_weight * (self.lm_logprob(prev, next) - self.unigram_logprob(next))
    }

    /// Per input position, the candidate outputs with their table log-scores;
    /// `None` marks an unknown input word.
    fn lattice(&self, input: &Sentence) -> Vec<Option<Vec<(u32, f64)>>> {
        input
            .tokens()
            .iter()
            .map(|w| {
                let f = self.input_vocab.get(w)?;
                let (cols, probs) = self.table.row(f);
                let best = probs.iter().copied().fold(0.0, f64::max);
                if best <= 0.0 {
                    return None;
                }
                let floor = best * self.settings.decode_prune;
                let mut cands: Vec<(u32, f64)> = cols
                    .iter()
                    .zip(probs)
                    .filter(|&(_, &p)| p >= floor)
                    .map(|(&e, &p)| (e, p.ln()))
                    .collect();
                if cands.len() > self.settings.max_candidates {
                    cands.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                    cands.truncate(self.settings.max_candidates.max(1));
                    cands.sort_by_key(|c| c.0);
                }
                Some(cands)
            })
            .collect()
    }

    /// Best path through the lattice and the log-partition over all paths.
    /// Unknown positions split the sentence into independent segments.
    fn search(&self, lattice: &[Option<Vec<(u32, f64)>>]) -> (Vec<Option<u32>>, f64, f64) {
        let mut path = Vec::with_capacity(lattice.len());
        let (mut best_total, mut log_z) = (0.0, 0.0);
        let mut j = 0;
        while j < lattice.len() {
            let Some(_) = &lattice[j] else {
                path.push(None);
                j += 1;
                continue;
            };
            let end = (j..lattice.len()).find(|&k| lattice[k].is_none()).unwrap_or(lattice.len());
            let segment: Vec<&Vec<(u32, f64)>> = lattice[j..end].iter().map(|c| c.as_ref().unwrap()).collect();
            let (ids, best, z) = match self.settings.decoder {
                Decoder::Viterbi => self.viterbi(&segment),
                Decoder::Greedy => self.greedy(&segment),
            };
            path.extend(ids.into_iter().map(Some));
            best_total += best;
            log_z += z;
            j = end;
        }
        (path, best_total, log_z)
    }

    fn greedy(&self, segment: &[&Vec<(u32, f64)>]) -> (Vec<u32>, f64, f64) {
        let mut prev = START;
        let mut ids = Vec::with_capacity(segment.len());
        let mut total = 0.0;
        for cands in segment {
            let (e, s) = cands
                .iter()
                .map(|&(e, s)| (e, s + self.transition(prev, e)))
                .fold((START, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
            total += s;
            ids.push(e);
            prev = e;
        }
        (ids, total, self.log_partition(segment))
    }

    fn log_partition(&self, segment: &[&Vec<(u32, f64)>]) -> f64 {
        self.viterbi(segment).2
    }

    fn viterbi(&self, segment: &[&Vec<(u32, f64)>]) -> (Vec<u32>, f64, f64) {
        let first = segment[0];
        let mut delta: Vec<f64> = first.iter().map(|&(e, s)| s + self.transition(START, e)).collect();
        let mut alpha = delta.clone();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(segment.len());
        for pair in segment.windows(2) {
            let (prev, cur) = (pair[0], pair[1]);
            let mut next_delta = Vec::with_capacity(cur.len());
            let mut next_alpha = Vec::with_capacity(cur.len());
            let mut pointers = Vec::with_capacity(cur.len());
            let mut terms = vec![0.0; prev.len()];
            for &(e, s) in cur {
                let (mut arg, mut best) = (0, f64::NEG_INFINITY);
                for (k, &(p, _)) in prev.iter().enumerate() {
                    let t = self.transition(p, e);
                    if delta[k] + t > best {
                        best = delta[k] + t;
                        arg = k;
                    }
                    terms[k] = alpha[k] + t;
                }
                next_delta.push(best + s);
                next_alpha.push(log_sum_exp(&terms) + s);
                pointers.push(arg);
            }
            delta = next_delta;
            alpha = next_alpha;
            back.push(pointers);
        }
        let (mut k, best) = delta
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &d)| if d > acc.1 { (k, d) } else { acc });
        let mut ids = vec![segment[segment.len() - 1][k].0];
        for (pos, pointers) in back.iter().enumerate().rev() {
            k = pointers[k];
            ids.push(segment[pos][k].0);
        }
        ids.reverse();
        (ids, best, log_sum_exp(&alpha))
    }

    /// Exact monotone decoding, one output word per input word, maximizing
    /// table score plus weighted language-model gain. Returns the output and
    /// its mean per-token log-posterior; unknown words are emitted as
    /// `<unk>` at a fixed penalty.
    pub fn translate(&self, input: &Sentence) -> (Sentence, f64) {
        if input.is_empty() {
            return (Sentence::empty(), 0.0);
        }
        let lattice = self.lattice(input);
        let (path, best, log_z) = self.search(&lattice);
        let unknown = path.iter().filter(|e| e.is_none()).count();
        let words: Vec<&str> = path
            .iter()
            .map(|e| e.map_or(UNK, |e| self.output_vocab.word(e)))
            .collect();
        let total = best - log_z + unknown as f64 * self.unk_logprob();
        (Sentence::from_tokens(words), total / path.len() as f64)
    }

    /// Mean per-token log-posterior of a given output under the decoder's
    /// model; equals the confidence [`translate`](Self::translate) reports
    /// for its own output. Tokens off the input's lattice, and length
    /// mismatches, cost twice the unknown-word penalty.
    pub fn score(&self, input: &Sentence, output: &Sentence) -> f64 {
        if output.is_empty() {
            return 0.0;
        }
        let lattice = self.lattice(input);
        let (_, _, log_z) = self.search(&lattice);
        let miss = 2.0 * self.unk_logprob();
        let n = output.len().max(input.len());
        let mut total = -log_z;
        let mut prev = START;
        for j in 0..n {
            let cands = lattice.get(j);
            let word = output.tokens().get(j);
            match (cands, word) {
                (Some(None), Some(w)) if w == UNK => {
                    total += self.unk_logprob();
                    prev = START;
                }
                (Some(Some(cands)), Some(w)) => {
                    let hit = self
                        .output_vocab
                        .get(w)
                        .and_then(|e| cands.iter().find(|c| c.0 == e));
                    match hit {
                        Some(&(e, s)) => {
                            total += s + self.transition(prev, e);
                            prev = e;
                        }
                        None => {
                            total += miss;
                            prev = START;
                        }
                    }
                }
                _ => {
                    total += miss;
                    prev = START;
                }
            }
        }
        total / n as f64
    }

    /// Mean of the tables (missing entries count as zero, rows renormalized);
    /// everything else is taken from the last model.
    pub fn average(models: &[&StatModel]) -> StatModel {
        let last = *models.last().expect("at least one model");
        let tables: Vec<&LexicalTable> = models.iter().map(|m| &m.table).collect();
        last.with_average(&tables)
    }

    /// This model with its table replaced by the mean of `tables` (tables
    /// from earlier states of this same model). A single table is copied
    /// as is.
    pub fn with_average(&self, tables: &[&LexicalTable]) -> StatModel {
        let mut out = self.snapshot();
        if let [only] = tables {
            out.table = (*only).clone();
        } else {
            let mut rows: Vec<Vec<u32>> = vec![Vec::new(); self.input_vocab.len()];
            for t in tables {
                for f in 0..t.rows() as u32 {
                    rows[f as usize].extend_from_slice(t.row(f).0);
                }
            }
            for r in &mut rows {
                r.sort_unstable();
                r.dedup();
            }
            let shape = LexicalTable::from_rows(
                rows.iter()
                    .map(|r| r.iter().map(|&e| (e, 0.0)).collect())
                    .collect(),
            );
            let mut table = shape.clone();
            let k = tables.len() as f64;
            for t in tables {
                for (acc, v) in table.probs.iter_mut().zip(t.align_to(&shape)) {
                    *acc += v / k;
                }
            }
            table.normalize_rows();
            out.table = table;
        }
        out.prior = self.aligned(&self.prior, &out.table);
        out.last_counts = if self.last_counts.is_empty() {
            Vec::new()
        } else {
            self.aligned(&self.last_counts, &out.table)
        };
        out
    }

    /// The lexical table as nested rows, for inspection.
    pub fn table_rows(&self) -> Vec<Vec<(String, f64)>> {
        self.table
            .to_rows()
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|(e, p)| (self.output_vocab.word(e).to_owned(), p))
                    .collect()
            })
            .collect()
    }

    /// Replaces one input word's row; for tests and hand-built models.
    pub fn set_row(&mut self, input: &str, row: &[(&str, f64)]) {
        let f = self.input_vocab.intern(input);
        let ids: Vec<(u32, f64)> = row.iter().map(|(w, p)| (self.output_vocab.intern(w), *p)).collect();
        let mut rows = self.table.to_rows();
        rows.resize(self.input_vocab.len(), Vec::new());
        let mut sorted = ids;
        sorted.sort_by_key(|(e, _)| *e);
        rows[f as usize] = sorted;
        let shape_prior = self.prior.clone();
        let shape_counts = self.last_counts.clone();
        let old = self.table.clone();
        self.table = LexicalTable::from_rows(rows);
        let realign = |v: &[f64]| {
            if v.is_empty() {
                Vec::new()
            } else {
                let mut h = old.clone();
                h.probs = v.to_vec();
                h.align_to(&self.table)
            }
        };
        self.prior = realign(&shape_prior);
        if self.prior.is_empty() {
            self.prior = vec![0.0; self.table.cols.len()];
        }
        self.last_counts = realign(&shape_counts);
        self.trained = true;
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(t: &str) -> Sentence {
        Sentence::from_tokens(t.split_whitespace())
    }

    fn run_em(pairs: &[(&str, &str)], steps: usize) -> StatModel {
        let owned: Vec<(Sentence, Sentence)> = pairs.iter().map(|(a, b)| (s(a), s(b))).collect();
        let refs: Vec<(&Sentence, &Sentence)> = owned.iter().map(|(a, b)| (a, b)).collect();
        let mut m = StatModel::new(StatSettings::default());
        m.begin_phase(&refs);
        for _ in 0..steps {
            m.step().unwrap();
        }
        m
    }

    #[test]
    fn one_word_pair_is_certain() {
        let m = run_em(&[("haus", "house")], 3);
        assert_eq!(m.translation_prob("haus", "house"), 1.0);
    }

    #[test]
    fn rows_stay_stochastic() {
        let m = run_em(&[("das haus", "the house"), ("das buch", "the book"), ("ein buch", "a book")], 7);
        for sum in m.table().row_sums() {
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decoding_uses_table_and_marks_unknown_words() {
        let m = run_em(&[("das haus", "the house"), ("das buch", "the book")], 20);
        let (out, conf) = m.translate(&s("das buch xyz"));
        assert_eq!(out.text(), "the book <unk>");
        assert!(conf < 0.0 && conf.is_finite());
        let (again, conf2) = m.translate(&s("das buch xyz"));
        assert_eq!((out, conf), (again, conf2));
    }

    #[test]
    fn score_matches_translate_confidence() {
        let m = run_em(&[("das haus", "the house"), ("das buch", "the book"), ("ein haus", "a house")], 10);
        for text in ["das haus", "ein buch", "das unknown"] {
            let (out, conf) = m.translate(&s(text));
            assert!((m.score(&s(text), &out) - conf).abs() < 1e-12, "{text}");
        }
    }

    #[test]
    fn serde_roundtrip_is_exact() {
        let m = run_em(&[("das haus", "the house"), ("das buch", "the book")], 5);
        let json = serde_json::to_string(&m).unwrap();
        let back: StatModel = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert_eq!(back.translate(&s("das haus")), m.translate(&s("das haus")));
    }
}
