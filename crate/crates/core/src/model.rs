//! Translation models, their training loop and persistence.
//!
//! A [`TranslationModel`] wraps one of two backends behind the same
//! train / fine-tune / translate interface. Training proceeds in phases; each
//! phase evaluates on a dev set at fixed intervals, stops early when dev BLEU
//! plateaus and keeps the latest parameter snapshots for averaging.

pub mod attention;
pub mod statistical;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{MonolingualCorpus, ParallelCorpus, ProvenanceKind, Sentence, Side};
use crate::metrics::{corpus_bleu, MetricError};

pub use attention::{AttentionModel, AttentionSettings};
pub use statistical::{Decoder, StatModel, StatSettings};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model has no parameters yet")]
    Untrained,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error("provenance check failed: {0}")]
    Provenance(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which side of a parallel corpus the model reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Source to target.
    Forward,
    /// Target to source.
    Backward,
}

impl Direction {
    pub fn input_side(self) -> Side {
        match self {
            Direction::Forward => Side::Source,
            Direction::Backward => Side::Target,
        }
    }

    pub fn output_side(self) -> Side {
        self.input_side().other()
    }

    /// (input, output) views of every pair.
    pub fn orient(self, corpus: &ParallelCorpus) -> Vec<(&Sentence, &Sentence)> {
        let (i, o) = (self.input_side(), self.output_side());
        corpus.pairs().iter().map(|p| (p.side(i), p.side(o))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Statistical(StatSettings),
    Attention(AttentionSettings),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Statistical(StatSettings::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Statistical(StatModel),
    Attention(AttentionModel),
}

impl Backend {
    fn new(config: &BackendConfig, seed: u64) -> Self {
        match config {
            BackendConfig::Statistical(s) => Backend::Statistical(StatModel::new(*s)),
            BackendConfig::Attention(s) => Backend::Attention(AttentionModel::new(*s, seed)),
        }
    }

    fn begin_phase(&mut self, pairs: &[(&Sentence, &Sentence)]) -> Result<()> {
        match self {
            Backend::Statistical(m) => m.begin_phase(pairs),
            Backend::Attention(m) => m.begin_phase(pairs)?,
        }
        Ok(())
    }

    fn end_phase(&mut self) {
        match self {
            Backend::Statistical(m) => m.end_phase(),
            Backend::Attention(m) => m.end_phase(),
        }
    }

    fn step(&mut self, schedule: &TrainingSchedule) -> Result<f64> {
        match self {
            Backend::Statistical(m) => m.step(),
            Backend::Attention(m) => m.step(schedule.batch_size, schedule.learning_rate),
        }
    }

    /// The trainable parameters alone, for checkpoint averaging.
    fn snapshot(&self) -> Snapshot {
        match self {
            Backend::Statistical(m) => Snapshot::Table(m.table().clone()),
            Backend::Attention(m) => Snapshot::Weights(m.parameters().to_vec()),
        }
    }

    /// This backend with its parameters replaced by the mean of `snaps`.
    fn averaged(&self, snaps: &[&Snapshot]) -> Option<Backend> {
        match self {
            Backend::Statistical(m) => {
                let tables: Option<Vec<_>> = snaps
                    .iter()
                    .map(|s| match s {
                        Snapshot::Table(t) => Some(t),
                        Snapshot::Weights(_) => None,
                    })
                    .collect();
                Some(Backend::Statistical(m.with_average(&tables?)))
            }
            Backend::Attention(m) => {
                let weights: Option<Vec<_>> = snaps
                    .iter()
                    .map(|s| match s {
                        Snapshot::Weights(w) => Some(w.as_slice()),
                        Snapshot::Table(_) => None,
                    })
                    .collect();
                Some(Backend::Attention(m.with_average(&weights?)))
            }
        }
    }

    fn translate(&self, input: &Sentence) -> Result<(Sentence, f64)> {
        match self {
            Backend::Statistical(m) => Ok(m.translate(input)),
            Backend::Attention(m) => m.translate(input),
        }
    }

    fn score(&self, input: &Sentence, output: &Sentence) -> Result<f64> {
        match self {
            Backend::Statistical(m) => Ok(m.score(input, output)),
            Backend::Attention(m) => m.score(input, output),
        }
    }
}

/// Parameters saved at a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    Table(statistical::LexicalTable),
    Weights(Vec<f64>),
}

/// Evaluation cadence, stopping rule and optimizer settings for a phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    /// Steps between dev evaluations (and checkpoints).
    pub eval_every: u64,
    /// Consecutive evaluations inspected by the stopping rule.
    pub stop_window: usize,
    /// Minimum dev BLEU gain, in points, that keeps training going.
    pub stop_threshold: f64,
    /// Number of trailing checkpoints averaged at the end of training.
    pub average_last_k: usize,
    /// Hard cap on steps per phase.
    pub max_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            eval_every: 1,
            stop_window: 4,
            stop_threshold: 0.2,
            average_last_k: 8,
            max_steps: 40,
            batch_size: 80,
            learning_rate: 0.0002,
        }
    }
}

impl TrainingSchedule {
    /// The full-scale setting: evaluation every 5000 updates, Adam at 2e-4,
    /// batches of 80 sentences.
    pub fn full_scale() -> Self {
        Self {
            eval_every: 5000,
            max_steps: 1_000_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(ModelError::Config("eval_every must be positive".into()));
        }
        if self.stop_window < 2 {
            return Err(ModelError::Config("stop_window must be at least 2".into()));
        }
        if self.average_last_k == 0 {
            return Err(ModelError::Config("average_last_k must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.stop_threshold.is_finite() {
            return Err(ModelError::Config("learning_rate and stop_threshold must be finite, rate positive".into()));
        }
        Ok(())
    }
}

/// True when the last `window` dev scores (in BLEU points) all fail to beat
/// the best score seen before them by at least `threshold`.
pub fn should_stop(dev_scores: &[f64], window: usize, threshold: f64) -> bool {
    if window == 0 || dev_scores.len() <= window {
        return false;
    }
    let split = dev_scores.len() - window;
    let best_before = dev_scores[..split].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gain = dev_scores[split..]
        .iter()
        .map(|s| s - best_before)
        .fold(f64::NEG_INFINITY, f64::max);
    gain < threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    /// Dev BLEU in points.
    pub dev_bleu: f64,
    pub phase: u32,
    #[serde(skip)]
    pub parameters: Option<Box<Snapshot>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Train,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    PhaseBoundary {
        step: u64,
        phase: u32,
        kind: PhaseKind,
        data: String,
        pairs: usize,
    },
    Evaluation {
        step: u64,
        phase: u32,
        loss: f64,
        dev_bleu: f64,
    },
    Stopped {
        step: u64,
        phase: u32,
        early: bool,
    },
}

/// What one phase did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSummary {
    pub steps: u64,
    pub evaluations: usize,
    pub stopped_early: bool,
    pub best_dev_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationModel {
    format_version: u32,
    id: String,
    direction: Direction,
    seed: u64,
    steps: u64,
    phases: u32,
    backend: Backend,
    history: Vec<Checkpoint>,
    log: Vec<LogRecord>,
}

impl TranslationModel {
    pub fn new(id: impl Into<String>, direction: Direction, config: &BackendConfig, seed: u64) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            id: id.into(),
            direction,
            seed,
            steps: 0,
            phases: 0,
            backend: Backend::new(config, seed),
            history: Vec::new(),
            log: Vec::new(),
        }
    }

    /// Wraps a hand-built statistical model.
    pub fn from_statistical(id: impl Into<String>, direction: Direction, model: StatModel) -> Self {
        let mut m = Self::new(id, direction, &BackendConfig::Statistical(model.settings), 0);
        m.backend = Backend::Statistical(model);
        m
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut Backend {
        &mut self.backend
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn history(&self) -> &[Checkpoint] {
        &self.history
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// Fixes the attention backend's vocabularies from several corpora before
    /// any phase runs; the statistical backend grows its vocabulary instead.
    pub fn prepare(&mut self, corpora: &[&ParallelCorpus]) -> Result<()> {
        if let Backend::Attention(m) = &mut self.backend {
            let pairs: Vec<(&Sentence, &Sentence)> =
                corpora.iter().flat_map(|c| self.direction.orient(c)).collect();
            m.initialize(&pairs)?;
        }
        Ok(())
    }

    /// Trains on `data`, evaluating on `dev`, until the stopping rule fires
    /// or `max_steps` is reached.
    pub fn train(&mut self, data: &ParallelCorpus, dev: &ParallelCorpus, schedule: &TrainingSchedule) -> Result<PhaseSummary> {
        self.run_phase(data, dev, schedule, PhaseKind::Train)
    }

    /// Continues from the current parameters on new data.
    pub fn fine_tune(&mut self, data: &ParallelCorpus, dev: &ParallelCorpus, schedule: &TrainingSchedule) -> Result<PhaseSummary> {
        self.run_phase(data, dev, schedule, PhaseKind::FineTune)
    }

    /// Trains on synthetic pairs, then fine-tunes on authentic pairs.
    /// With no synthetic data this is plain training on the authentic data.
    pub fn pretrain_finetune(
        &mut self,
        synthetic: &ParallelCorpus,
        authentic: &ParallelCorpus,
        dev: &ParallelCorpus,
        schedule: &TrainingSchedule,
    ) -> Result<(Option<PhaseSummary>, PhaseSummary)> {
        if !synthetic.all_kind(ProvenanceKind::Synthetic) {
            return Err(ModelError::Provenance(format!(
                "pretraining corpus `{}` contains authentic pairs",
                synthetic.name()
            )));
        }
        if !authentic.all_kind(ProvenanceKind::Authentic) {
            return Err(ModelError::Provenance(format!(
                "fine-tuning corpus `{}` contains synthetic pairs",
                authentic.name()
            )));
        }
        if synthetic.is_empty() {
            return Ok((None, self.train(authentic, dev, schedule)?));
        }
        self.prepare(&[synthetic, authentic])?;
        let pre = self.train(synthetic, dev, schedule)?;
        let fine = self.fine_tune(authentic, dev, schedule)?;
        Ok((Some(pre), fine))
    }

    fn run_phase(&mut self, data: &ParallelCorpus, dev: &ParallelCorpus, schedule: &TrainingSchedule, kind: PhaseKind) -> Result<PhaseSummary> {
        schedule.validate()?;
        let phase = self.phases;
        self.phases += 1;
        if phase > 0 {
            self.log.push(LogRecord::PhaseBoundary {
                step: self.steps,
                phase,
                kind,
                data: data.name().to_owned(),
                pairs: data.len(),
            });
        }
        // averaging never mixes parameters from different phases
        for c in &mut self.history {
            c.parameters = None;
        }
        let pairs = self.direction.orient(data);
        self.backend.begin_phase(&pairs)?;

        let mut scores = Vec::new();
        let mut stopped_early = false;
        let mut taken = 0;
        let result = (|| {
            for step in 1..=schedule.max_steps {
                let loss = self.backend.step(schedule).map_err(|e| ModelError::Divergence {
                    step: self.steps + 1,
                    reason: e.to_string(),
                })?;
                if !loss.is_finite() {
                    return Err(ModelError::Divergence {
                        step: self.steps + 1,
                        reason: "loss is not finite".into(),
                    });
                }
                self.steps += 1;
                taken = step;
                if step % schedule.eval_every != 0 {
                    continue;
                }
                let dev_bleu = if dev.is_empty() { 0.0 } else { self.evaluate(dev)? };
                scores.push(dev_bleu);
                log::debug!("{} step {} loss {loss:.4} dev {dev_bleu:.2}", self.id, self.steps);
                self.log.push(LogRecord::Evaluation {
                    step: self.steps,
                    phase,
                    loss,
                    dev_bleu,
                });
                let snapshot = self.backend.snapshot();
                self.history.push(Checkpoint {
                    step: self.steps,
                    dev_bleu,
                    phase,
                    parameters: Some(Box::new(snapshot)),
                });
                let kept: Vec<usize> = self
                    .history
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.parameters.is_some())
                    .map(|(i, _)| i)
                    .collect();
                if kept.len() > schedule.average_last_k {
                    self.history[kept[0]].parameters = None;
                }
                if !dev.is_empty() && should_stop(&scores, schedule.stop_window, schedule.stop_threshold) {
                    stopped_early = true;
                    break;
                }
            }
            Ok(())
        })();
        self.backend.end_phase();
        result?;
        self.log.push(LogRecord::Stopped {
            step: self.steps,
            phase,
            early: stopped_early,
        });
        Ok(PhaseSummary {
            steps: taken,
            evaluations: scores.len(),
            stopped_early,
            best_dev_bleu: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// Replaces the parameters with the mean of the last `k` retained
    /// snapshots. Returns how many were averaged.
    pub fn average_checkpoints(&mut self, k: usize) -> usize {
        let snaps: Vec<&Snapshot> = self
            .history
            .iter()
            .filter_map(|c| c.parameters.as_deref())
            .collect();
        let take = k.min(snaps.len());
        if take == 0 {
            return 0;
        }
        if let Some(avg) = self.backend.averaged(&snaps[snaps.len() - take..]) {
            self.backend = avg;
            take
        } else {
            0
        }
    }

    pub fn translate(&self, sentences: &[Sentence]) -> Result<Vec<(Sentence, f64)>> {
        sentences.par_iter().map(|s| self.backend.translate(s)).collect()
    }

    pub fn translate_corpus(&self, corpus: &MonolingualCorpus) -> Result<Vec<(Sentence, f64)>> {
        self.translate(corpus.sentences())
    }

    /// Mean per-token log-probability the model assigns to `output`.
    pub fn score_pair(&self, input: &Sentence, output: &Sentence) -> Result<f64> {
        self.backend.score(input, output)
    }

    /// Corpus BLEU in points on the model's direction of `dev`.
    pub fn evaluate(&self, dev: &ParallelCorpus) -> Result<f64> {
        let inputs: Vec<Sentence> = dev.side(self.direction.input_side()).cloned().collect();
        let refs: Vec<Sentence> = dev.side(self.direction.output_side()).cloned().collect();
        let hyps: Vec<Sentence> = self.translate(&inputs)?.into_iter().map(|(s, _)| s).collect();
        Ok(corpus_bleu(&hyps, &refs)?.points())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format version {} (expected {MODEL_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let model: Self = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        let checked = match &model.backend {
            Backend::Statistical(m) => m.check_structure(),
            Backend::Attention(m) => m.check_structure(),
        };
        checked.map_err(ModelError::Format)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Writes every retained snapshot as `<id>.step<N>` under `dir`.
    pub fn write_checkpoints(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for c in &self.history {
            if let Some(params) = &c.parameters {
                let mut snap = self.clone();
                snap.backend = self.backend.averaged(&[params]).expect("snapshot matches backend");
                for h in &mut snap.history {
                    h.parameters = None;
                }
                let path = dir.join(format!("{}.step{}", self.id, c.step));
                snap.save(&path)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| ModelError::Io {
                path: parent.to_owned(),
                source,
            })?;
        }
    }
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.to_owned(),
        source,
    })
}

/// One EM update of a statistical model on `data` read in `direction`.
pub fn em_step(model: &StatModel, data: &ParallelCorpus, direction: Direction) -> Result<StatModel> {
    model.em_update(&direction.orient(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, SentencePair};
    use proptest::prelude::*;

    fn pair(a: &str, b: &str, p: Provenance) -> SentencePair {
        SentencePair {
            source: Sentence::from_tokens(a.split_whitespace()),
            target: Sentence::from_tokens(b.split_whitespace()),
            provenance: p,
        }
    }

    fn corpus(name: &str, rows: &[(&str, &str)], p: Provenance) -> ParallelCorpus {
        ParallelCorpus::new(name, rows.iter().map(|(a, b)| pair(a, b, p.clone())).collect()).unwrap()
    }

    #[test]
    fn stopping_rule_examples() {
        assert!(should_stop(&[10.0, 10.1, 10.15, 10.1, 10.05], 4, 0.2));
        assert!(!should_stop(&[10.0, 10.1, 10.5, 10.6, 10.6], 4, 0.2));
        assert!(!should_stop(&[10.0, 10.0, 10.0, 10.0], 4, 0.2));
    }

    proptest! {
        #[test]
        fn stopping_is_monotone_in_threshold(
            scores in prop::collection::vec(0.0f64..50.0, 0..12),
            t1 in 0.0f64..5.0,
            dt in 0.0f64..5.0,
        ) {
            if should_stop(&scores, 4, t1) {
                prop_assert!(should_stop(&scores, 4, t1 + dt));
            }
        }
    }

    #[test]
    fn provenance_is_checked() {
        let auth = corpus("a", &[("x", "y")], Provenance::Authentic);
        let syn = corpus("s", &[("x", "y")], Provenance::synthetic("b0", 0));
        let mut m = TranslationModel::new("f", Direction::Forward, &BackendConfig::default(), 1);
        let err = m.pretrain_finetune(&auth, &auth, &auth, &TrainingSchedule::default());
        assert!(matches!(err, Err(ModelError::Provenance(_))));
        let err = m.pretrain_finetune(&syn, &syn, &auth, &TrainingSchedule::default());
        assert!(matches!(err, Err(ModelError::Provenance(_))));
    }

    #[test]
    fn phase_boundary_is_logged_once() {
        let auth = corpus("auth", &[("das haus", "the house"), ("das buch", "the book")], Provenance::Authentic);
        let syn = corpus("syn", &[("ein haus", "a house")], Provenance::synthetic("b0", 0));
        let mut m = TranslationModel::new("f", Direction::Forward, &BackendConfig::default(), 1);
        m.pretrain_finetune(&syn, &auth, &auth, &TrainingSchedule::default()).unwrap();
        let boundaries = m.log().iter().filter(|r| matches!(r, LogRecord::PhaseBoundary { .. })).count();
        assert_eq!(boundaries, 1);
    }

    #[test]
    fn zero_step_fine_tune_keeps_parameters() {
        let auth = corpus("auth", &[("das haus", "the house"), ("das buch", "the book")], Provenance::Authentic);
        let other = corpus("other", &[("ein buch", "a book")], Provenance::Authentic);
        let mut m = TranslationModel::new("f", Direction::Forward, &BackendConfig::default(), 1);
        m.train(&auth, &auth, &TrainingSchedule::default()).unwrap();
        let before = m.backend().clone();
        let schedule = TrainingSchedule { max_steps: 0, ..TrainingSchedule::default() };
        m.fine_tune(&other, &auth, &schedule).unwrap();
        assert_eq!(m.backend(), &before);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let auth = corpus("auth", &[("das haus", "the house"), ("das buch", "the book")], Provenance::Authentic);
        let mut m = TranslationModel::new("f", Direction::Backward, &BackendConfig::default(), 1);
        m.train(&auth, &auth, &TrainingSchedule::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let loaded = TranslationModel::load(&path).unwrap();
        assert_eq!(loaded.to_json(), m.to_json());
        let input = [Sentence::from_tokens(["the", "book"])];
        assert_eq!(loaded.translate(&input).unwrap(), m.translate(&input).unwrap());
    }

    #[test]
    fn unknown_format_version_is_rejected() {
        let m = TranslationModel::new("f", Direction::Forward, &BackendConfig::default(), 1);
        let text = m.to_json().replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(TranslationModel::from_json(&text), Err(ModelError::Format(_))));
    }
}
