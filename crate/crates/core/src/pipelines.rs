//! The back-translation and self-learning training strategies, their model
//! accounting, and the resumable experiment runner.
//!
//! Every strategy is a sequence of named stages (train a model, generate a
//! synthetic corpus). When an experiment directory is given, each finished
//! stage is persisted and listed in `manifest.json`, so an interrupted run
//! picks up where it stopped and produces the same report.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    load_parallel, CorpusError, MonolingualCorpus, ParallelCorpus, Provenance, Sentence, SentencePair,
    SyntheticOracle, TokenizeOptions,
};
use crate::metrics::corpus_bleu;
use crate::model::{BackendConfig, Direction, LogRecord, ModelError, TrainingSchedule, TranslationModel};
use crate::qe::{estimate, load_external_scores, select_top_n, Fraction, QeError, QeScorer};
use crate::subword::{learn_bpe, learn_joint_bpe, undo_bpe, BpeCodec, BpeError, DEFAULT_MERGES, UNK};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("stage `{stage}`: {source}")]
    Model {
        stage: String,
        #[source]
        source: ModelError,
    },
    #[error("stage `{stage}`: {source}")]
    Qe {
        stage: String,
        #[source]
        source: QeError,
    },
    #[error("stage `{stage}`: {source}")]
    Corpus {
        stage: String,
        #[source]
        source: CorpusError,
    },
    #[error("stage `{stage}`: {source}")]
    Bpe {
        stage: String,
        #[source]
        source: BpeError,
    },
    #[error("iteration {iteration} selected nothing from a pool of {pool}")]
    NoProgress { iteration: u32, pool: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("experiment manifest: {0}")]
    Manifest(String),
    #[error("halted after stage `{stage}` as requested")]
    Halted { stage: String },
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    StandardBt,
    SlBt,
    SlQeBt,
    IterSlQeBt,
    IterSlBt,
    IterBt,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::StandardBt,
        Strategy::SlBt,
        Strategy::SlQeBt,
        Strategy::IterSlQeBt,
        Strategy::IterSlBt,
        Strategy::IterBt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::StandardBt => "standard_bt",
            Strategy::SlBt => "sl_bt",
            Strategy::SlQeBt => "sl_qe_bt",
            Strategy::IterSlQeBt => "iter_sl_qe_bt",
            Strategy::IterSlBt => "iter_sl_bt",
            Strategy::IterBt => "iter_bt",
        }
    }

    pub fn uses_qe(self) -> bool {
        matches!(self, Strategy::SlQeBt | Strategy::IterSlQeBt)
    }

    pub fn needs_source_mono(self) -> bool {
        self == Strategy::IterBt
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown strategy `{s}`")))
    }
}

/// Number of models a strategy trains: `2k + 2` for iterative
/// back-translation, `k + 3` for iterative self-learning, 2 and 3 for the
/// single-pass strategies.
pub fn model_count(strategy: Strategy, k: u32) -> u64 {
    let k = u64::from(k);
    match strategy {
        Strategy::StandardBt => 2,
        Strategy::SlBt | Strategy::SlQeBt => 3,
        Strategy::IterSlBt | Strategy::IterSlQeBt => k + 3,
        Strategy::IterBt => 2 * k + 2,
    }
}

/// [`model_count`] by strategy name.
pub fn model_count_by_name(strategy: &str, k: u32) -> Result<u64> {
    Ok(model_count(strategy.parse()?, k))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QeMethod {
    /// The generating model's mean per-token log-probability.
    #[default]
    ModelConfidence,
    /// Distance to the exact translation; generated data only.
    Oracle,
    /// `index<TAB>score` file indexed by target monolingual sentence.
    External { path: PathBuf },
}

/// Subword handling around model training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BpeMode {
    /// Models see whole words.
    Off,
    /// One codec learned on the authentic data, shared by every model.
    Fixed,
    /// A joint codec over authentic and synthetic data, relearned for
    /// every model whose synthetic data differs.
    #[default]
    Relearn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    /// Iteration count for the iterative strategies.
    pub k: u32,
    /// Share of synthetic pairs kept by quality estimation.
    pub qe_fraction: Option<Fraction>,
    pub qe_method: QeMethod,
    pub schedule: TrainingSchedule,
    pub backend: BackendConfig,
    pub seed: u64,
    /// Stop self-learning iterations early once the dev BLEU gain between
    /// successive backward models falls below the schedule's threshold.
    pub convergence_stop: bool,
    pub bpe: BpeMode,
    pub bpe_merges: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::StandardBt,
            k: 2,
            qe_fraction: None,
            qe_method: QeMethod::default(),
            schedule: TrainingSchedule::default(),
            backend: BackendConfig::default(),
            seed: 1,
            convergence_stop: false,
            bpe: BpeMode::default(),
            bpe_merges: DEFAULT_MERGES,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.strategy.uses_qe(), self.qe_fraction) {
            (true, None) => {
                return Err(PipelineError::Config(format!("{} needs qe_fraction", self.strategy)));
            }
            (false, Some(_)) => {
                return Err(PipelineError::Config(format!(
                    "qe_fraction only applies to QE strategies, not {}",
                    self.strategy
                )));
            }
            _ => {}
        }
        self.schedule
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Corpora a pipeline run consumes.
#[derive(Debug, Clone)]
pub struct PipelineData {
    pub authentic: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: Option<ParallelCorpus>,
    pub mono_target: MonolingualCorpus,
    pub mono_source: Option<MonolingualCorpus>,
    /// Needed only by the oracle QE method.
    pub oracle: Option<SyntheticOracle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Backward,
    Forward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub role: Role,
    pub iteration: u32,
    /// Training steps spent on this model.
    pub steps: u64,
    /// Steps spent on all models so far in the run.
    pub cumulative_steps: u64,
    pub pretrain_pairs: usize,
    pub finetune_pairs: usize,
    pub dev_bleu: f64,
    pub test_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub backward_id: String,
    pub backward_dev_bleu: f64,
    pub backward_test_bleu: Option<f64>,
    /// Monolingual sentences still unselected before this iteration.
    pub pool_before: Option<usize>,
    pub selected: Option<usize>,
    /// Monolingual sentences still unselected after this iteration.
    pub remaining: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    /// Iterations actually run; equals the configured k unless the
    /// strategy derives it (QE iterations) or stopped on convergence.
    pub k: u32,
    pub seed: u64,
    pub models: Vec<ModelRecord>,
    pub iterations: Vec<IterationRecord>,
    pub total_models: u64,
    pub total_steps: u64,
    pub forward_training_pairs: usize,
    pub forward_dev_bleu: f64,
    pub forward_test_bleu: Option<f64>,
    /// Excluded from reproducibility comparisons.
    pub wall_seconds: f64,
}

impl PipelineReport {
    /// Checks the structural promises every report makes.
    pub fn validate(&self, authentic: usize, mono: usize) -> Result<()> {
        let expected = model_count(self.strategy, self.k);
        if self.total_models != expected || self.models.len() as u64 != expected {
            return Err(PipelineError::Manifest(format!(
                "{} with k={} must train {expected} models, report lists {}",
                self.strategy,
                self.k,
                self.models.len()
            )));
        }
        if self.forward_training_pairs != authentic + mono {
            return Err(PipelineError::Manifest(format!(
                "forward model saw {} pairs, expected {}",
                self.forward_training_pairs,
                authentic + mono
            )));
        }
        Ok(())
    }

    /// The report with timing removed, for equality checks across runs.
    pub fn without_timing(&self) -> PipelineReport {
        PipelineReport {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: PipelineReport = serde_json::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(PipelineError::Manifest(format!("unsupported report schema {}", r.schema_version)));
        }
        Ok(r)
    }

    /// Tab-separated summary: one row per model, then totals.
    pub fn summary_table(&self) -> String {
        let mut out = format!("strategy\t{}\tk\t{}\n", self.strategy, self.k);
        out.push_str("model\trole\titeration\tsteps\tdev_bleu\ttest_bleu\n");
        for m in &self.models {
            let test = m.test_bleu.map_or_else(|| "-".to_owned(), |b| format!("{b:.2}"));
            out.push_str(&format!(
                "{}\t{:?}\t{}\t{}\t{:.2}\t{}\n",
                m.id, m.role, m.iteration, m.steps, m.dev_bleu, test
            ));
        }
        out.push_str(&format!("total_models\t{}\ntotal_steps\t{}\n", self.total_models, self.total_steps));
        out
    }
}

/// A trained model plus the codec its inputs and outputs are segmented with.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: TranslationModel,
    pub codec: Option<BpeCodec>,
    pub role: Role,
    pub iteration: u32,
}

impl TrainedModel {
    fn segment(&self, s: &Sentence) -> Sentence {
        match &self.codec {
            Some(c) => c.apply(s),
            None => s.clone(),
        }
    }

    fn restore(&self, s: Sentence) -> Sentence {
        if self.codec.is_some() {
            undo_bpe(&s)
        } else {
            s
        }
    }

    /// Word-level translation with confidences.
    pub fn translate(&self, sentences: &[Sentence]) -> Result<Vec<(Sentence, f64)>, ModelError> {
        let inputs: Vec<Sentence> = sentences.iter().map(|s| self.segment(s)).collect();
        Ok(self
            .model
            .translate(&inputs)?
            .into_iter()
            .map(|(s, c)| (self.restore(s), c))
            .collect())
    }

    /// Word-level outputs for the model's input side of `corpus`.
    pub fn hypotheses(&self, corpus: &ParallelCorpus) -> Result<Vec<Sentence>, ModelError> {
        let inputs: Vec<Sentence> = corpus.side(self.model.direction().input_side()).cloned().collect();
        Ok(self.translate(&inputs)?.into_iter().map(|(s, _)| s).collect())
    }

    /// Word-level corpus BLEU in points.
    pub fn bleu(&self, corpus: &ParallelCorpus) -> Result<f64, ModelError> {
        let refs: Vec<Sentence> = corpus.side(self.model.direction().output_side()).cloned().collect();
        Ok(corpus_bleu(&self.hypotheses(corpus)?, &refs)?.points())
    }
}

/// Everything a pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// In training order.
    pub models: Vec<TrainedModel>,
    pub report: PipelineReport,
}

impl PipelineOutcome {
    pub fn backward_models(&self) -> impl Iterator<Item = &TrainedModel> {
        self.models.iter().filter(|m| m.role == Role::Backward)
    }

    pub fn final_backward(&self) -> &TrainedModel {
        self.backward_models().last().expect("every strategy trains a backward model")
    }

    pub fn final_forward(&self) -> &TrainedModel {
        self.models
            .iter()
            .rev()
            .find(|m| m.role == Role::Forward)
            .expect("every strategy trains a forward model")
    }

    pub fn model(&self, id: &str) -> Option<&TrainedModel> {
        self.models.iter().find(|m| m.model.id() == id)
    }
}

/// Controls persistence for [`run_experiment`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Reuse finished stages listed in an existing manifest.
    pub resume: bool,
    /// Stop with [`PipelineError::Halted`] after this many newly finished
    /// stages; simulates an interruption.
    pub halt_after: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: String,
    completed: Vec<String>,
    /// Generator model and iteration of each synthetic corpus, by stage.
    synthetic: BTreeMap<String, (String, u32)>,
}

/// Persistence and resume bookkeeping; a no-op without a directory.
struct Store {
    dir: Option<PathBuf>,
    manifest: Manifest,
    halt_after: Option<usize>,
    finished_now: usize,
}

impl Store {
    fn open(dir: Option<&Path>, cfg: &PipelineConfig, opts: &RunOptions) -> Result<Self> {
        let config = serde_json::to_string(cfg).expect("config serializes");
        let mut manifest = Manifest {
            version: MANIFEST_VERSION,
            config: config.clone(),
            ..Manifest::default()
        };
        if let Some(dir) = dir {
            for sub in ["models", "synthetic", "plots"] {
                fs::create_dir_all(dir.join(sub)).map_err(io_err(&dir.join(sub)))?;
            }
            let path = dir.join("manifest.json");
            if opts.resume && path.exists() {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let old: Manifest =
                    serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
                if old.version != MANIFEST_VERSION {
                    return Err(PipelineError::Manifest(format!("unsupported manifest version {}", old.version)));
                }
                if old.config != config {
                    return Err(PipelineError::Manifest(
                        "existing experiment was run with a different configuration".into(),
                    ));
                }
                manifest = old;
            } else {
                let log = dir.join("log.jsonl");
                fs::write(&log, "").map_err(io_err(&log))?;
            }
        }
        Ok(Self {
            dir: dir.map(Path::to_owned),
            manifest,
            halt_after: opts.halt_after,
            finished_now: 0,
        })
    }

    fn done(&self, stage: &str) -> bool {
        self.dir.is_some() && self.manifest.completed.iter().any(|s| s == stage)
    }

    fn finish(&mut self, stage: &str) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        self.manifest.completed.push(stage.to_owned());
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        self.finished_now += 1;
        if self.halt_after.is_some_and(|n| self.finished_now >= n) {
            return Err(PipelineError::Halted { stage: stage.to_owned() });
        }
        Ok(())
    }
}

/// Shared state while a strategy runs.
struct Run<'a> {
    cfg: &'a PipelineConfig,
    data: &'a PipelineData,
    store: Store,
    models: Vec<TrainedModel>,
    records: Vec<ModelRecord>,
    iterations: Vec<IterationRecord>,
    total_steps: u64,
    synthetic_count: u32,
    fixed_codec: Option<BpeCodec>,
    external_scores: Option<Vec<f64>>,
    forward_pairs: usize,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a PipelineConfig, data: &'a PipelineData, store: Store) -> Result<Self> {
        let external_scores = match &cfg.qe_method {
            QeMethod::External { path } if cfg.strategy.uses_qe() => Some(
                load_external_scores(path, data.mono_target.len()).map_err(|source| PipelineError::Qe {
                    stage: "load external scores".into(),
                    source,
                })?,
            ),
            _ => None,
        };
        if cfg.strategy.uses_qe() && cfg.qe_method == QeMethod::Oracle && data.oracle.is_none() {
            return Err(PipelineError::Config("oracle QE needs the generated language's oracle".into()));
        }
        Ok(Self {
            cfg,
            data,
            store,
            models: Vec::new(),
            records: Vec::new(),
            iterations: Vec::new(),
            total_steps: 0,
            synthetic_count: 0,
            fixed_codec: None,
            external_scores,
            forward_pairs: 0,
        })
    }

    fn codec_for(&mut self, stage: &str, synthetic: Option<&ParallelCorpus>) -> Result<Option<BpeCodec>> {
        let bpe_err = |source| PipelineError::Bpe {
            stage: stage.to_owned(),
            source,
        };
        match (self.cfg.bpe, synthetic) {
            (BpeMode::Off, _) => Ok(None),
            (BpeMode::Relearn, Some(syn)) => learn_joint_bpe(&self.data.authentic, syn, self.cfg.bpe_merges)
                .map(Some)
                .map_err(bpe_err),
            (BpeMode::Fixed, _) | (BpeMode::Relearn, None) => {
                if self.fixed_codec.is_none() {
                    let a = &self.data.authentic;
                    self.fixed_codec =
                        Some(learn_bpe(a.sources().chain(a.targets()), self.cfg.bpe_merges).map_err(bpe_err)?);
                }
                Ok(self.fixed_codec.clone())
            }
        }
    }

    fn segment(codec: &Option<BpeCodec>, corpus: &ParallelCorpus) -> ParallelCorpus {
        match codec {
            None => corpus.clone(),
            Some(c) => {
                let pairs = corpus
                    .pairs()
                    .iter()
                    .map(|p| SentencePair {
                        source: c.apply(&p.source),
                        target: c.apply(&p.target),
                        provenance: p.provenance.clone(),
                    })
                    .collect();
                ParallelCorpus::new(corpus.name(), pairs).expect("segmentation keeps sentences non-empty")
            }
        }
    }

    /// Trains (or reloads) one model: plain training on the authentic data,
    /// or pretraining on `synthetic` followed by fine-tuning.
    fn train(&mut self, id: &str, role: Role, iteration: u32, synthetic: Option<&ParallelCorpus>) -> Result<usize> {
        let direction = match role {
            Role::Backward => Direction::Backward,
            Role::Forward => Direction::Forward,
        };
        let stage = format!("model:{id}");
        let model_err = |source| PipelineError::Model {
            stage: stage.clone(),
            source,
        };
        let codec = self.codec_for(&stage, synthetic)?;
        let model = if self.store.done(&stage) {
            let dir = self.store.dir.as_ref().expect("resume needs a directory");
            TranslationModel::load(&dir.join("models").join(format!("{id}.json"))).map_err(model_err)?
        } else {
            let seed = self.cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(self.models.len() as u64 + 1));
            let mut model = TranslationModel::new(id, direction, &self.cfg.backend, seed);
            let auth = Self::segment(&codec, &self.data.authentic);
            let dev = Self::segment(&codec, &self.data.dev);
            let schedule = &self.cfg.schedule;
            match synthetic {
                Some(syn) => {
                    let syn = Self::segment(&codec, syn);
                    model.pretrain_finetune(&syn, &auth, &dev, schedule).map_err(model_err)?;
                }
                None => {
                    model.train(&auth, &dev, schedule).map_err(model_err)?;
                }
            }
            model.average_checkpoints(schedule.average_last_k);
            self.persist_model(&model, &codec)?;
            model
        };
        let trained = TrainedModel {
            model,
            codec,
            role,
            iteration,
        };
        let dev_bleu = trained.bleu(&self.data.dev).map_err(model_err)?;
        let test_bleu = match &self.data.test {
            Some(t) => Some(trained.bleu(t).map_err(model_err)?),
            None => None,
        };
        self.total_steps += trained.model.steps();
        let pretrain_pairs = synthetic.map_or(0, ParallelCorpus::len);
        if role == Role::Forward {
            self.forward_pairs = pretrain_pairs + self.data.authentic.len();
        }
        log::info!("{id}: dev {dev_bleu:.2} after {} steps", trained.model.steps());
        self.records.push(ModelRecord {
            id: id.to_owned(),
            role,
            iteration,
            steps: trained.model.steps(),
            cumulative_steps: self.total_steps,
            pretrain_pairs,
            finetune_pairs: self.data.authentic.len(),
            dev_bleu,
            test_bleu,
        });
        self.models.push(trained);
        if !self.store.done(&stage) {
            self.store.finish(&stage)?;
        }
        Ok(self.models.len() - 1)
    }

    fn persist_model(&self, model: &TranslationModel, codec: &Option<BpeCodec>) -> Result<()> {
        let Some(dir) = &self.store.dir else { return Ok(()) };
        let id = model.id();
        let stage = format!("model:{id}");
        model
            .save(&dir.join("models").join(format!("{id}.json")))
            .map_err(|source| PipelineError::Model {
                stage: stage.clone(),
                source,
            })?;
        if let Some(c) = codec {
            let path = dir.join("models").join(format!("{id}.codec"));
            fs::write(&path, c.to_text()).map_err(io_err(&path))?;
        }
        let plot = dir.join("plots").join(format!("{id}.csv"));
        let mut csv = String::from("step,dev_bleu\n");
        for c in model.history() {
            csv.push_str(&format!("{},{}\n", c.step, c.dev_bleu));
        }
        fs::write(&plot, csv).map_err(io_err(&plot))?;
        let log_path = dir.join("log.jsonl");
        let mut log = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        for record in model.log() {
            #[derive(Serialize)]
            struct Line<'r> {
                model: &'r str,
                #[serde(flatten)]
                record: &'r LogRecord,
            }
            let line = serde_json::to_string(&Line { model: id, record }).expect("log line serializes");
            writeln!(log, "{line}").map_err(io_err(&log_path))?;
        }
        Ok(())
    }

    /// Translates `sentences` with model `idx` and pairs each output with
    /// its input, synthetic side on the model's output side. Returns the
    /// corpus and the confidences.
    fn synthesize(&mut self, idx: usize, sentences: &[Sentence]) -> Result<(ParallelCorpus, Vec<f64>)> {
        let n = self.synthetic_count;
        self.synthetic_count += 1;
        let name = format!("iter{n}");
        let stage = format!("synthetic:{name}");
        let trained = &self.models[idx];
        let generator = trained.model.id().to_owned();
        let iteration = trained.iteration;
        let provenance = Provenance::synthetic(generator.clone(), iteration);
        let backward = trained.model.direction() == Direction::Backward;
        let corpus_err = |source| PipelineError::Corpus {
            stage: stage.clone(),
            source,
        };

        if self.store.done(&stage) {
            let dir = self.store.dir.as_ref().expect("resume needs a directory");
            let (gen, it) = self.store.manifest.synthetic.get(&stage).cloned().ok_or_else(|| {
                PipelineError::Manifest(format!("no provenance recorded for {stage}"))
            })?;
            let base = dir.join("synthetic");
            let (corpus, _) = load_parallel(
                &base.join(format!("{name}.src")),
                &base.join(format!("{name}.tgt")),
                Provenance::synthetic(gen, it),
                TokenizeOptions::default(),
            )
            .map_err(corpus_err)?;
            let scores_path = base.join(format!("{name}.scores"));
            let scores = load_external_scores(&scores_path, corpus.len()).map_err(|source| PipelineError::Qe {
                stage: stage.clone(),
                source,
            })?;
            return Ok((corpus, scores));
        }

        let outputs = trained.translate(sentences).map_err(|source| PipelineError::Model {
            stage: stage.clone(),
            source,
        })?;
        let mut pairs = Vec::with_capacity(outputs.len());
        let mut scores = Vec::with_capacity(outputs.len());
        for (input, (output, conf)) in sentences.iter().zip(outputs) {
            // keep both sides non-empty so the pair survives a reload
            let output = if output.is_empty() { Sentence::from_tokens([UNK]) } else { output };
            let (source, target) = if backward { (output, input.clone()) } else { (input.clone(), output) };
            pairs.push(SentencePair {
                source,
                target,
                provenance: provenance.clone(),
            });
            scores.push(conf);
        }
        let corpus = ParallelCorpus::new(name.clone(), pairs).map_err(corpus_err)?;
        if let Some(dir) = &self.store.dir {
            let base = dir.join("synthetic");
            corpus
                .write_files(&base.join(format!("{name}.src")), &base.join(format!("{name}.tgt")))
                .map_err(corpus_err)?;
            let scores_path = base.join(format!("{name}.scores"));
            let text: String = scores.iter().enumerate().map(|(i, s)| format!("{i}\t{s}\n")).collect();
            fs::write(&scores_path, text).map_err(io_err(&scores_path))?;
            self.store.manifest.synthetic.insert(stage.clone(), (generator, iteration));
        }
        self.store.finish(&stage)?;
        Ok((corpus, scores))
    }

    /// QE-selects `n` pairs of `corpus`, whose `k`-th pair came from target
    /// monolingual sentence `mono_index[k]`.
    fn select(&self, corpus: &ParallelCorpus, confidences: &[f64], mono_index: &[usize], n: usize) -> Result<(ParallelCorpus, Vec<usize>)> {
        let stage = format!("select:{}", corpus.name());
        let qe_err = |source| PipelineError::Qe {
            stage: stage.clone(),
            source,
        };
        let external: Vec<f64>;
        let scorer = match &self.cfg.qe_method {
            QeMethod::ModelConfidence => QeScorer::External(confidences),
            QeMethod::Oracle => QeScorer::Oracle(self.data.oracle.as_ref().expect("checked at start")),
            QeMethod::External { .. } => {
                let all = self.external_scores.as_ref().expect("loaded at start");
                external = mono_index.iter().map(|&i| all[i]).collect();
                QeScorer::External(&external)
            }
        };
        let scored = estimate(corpus, scorer).map_err(qe_err)?;
        let (selected, _) = select_top_n(&scored, n, corpus.name());
        let mut ranked: Vec<&crate::qe::ScoredPair> = scored.iter().collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.original_index.cmp(&b.original_index)));
        let mut chosen: Vec<usize> = ranked.iter().take(n).map(|s| s.original_index).collect();
        chosen.sort_unstable();
        Ok((selected, chosen))
    }

    fn record_iteration(&mut self, idx: usize, pool: Option<(usize, usize, usize)>) {
        let r = &self.records[idx];
        self.iterations.push(IterationRecord {
            iteration: self.models[idx].iteration,
            backward_id: r.id.clone(),
            backward_dev_bleu: r.dev_bleu,
            backward_test_bleu: r.test_bleu,
            pool_before: pool.map(|p| p.0),
            selected: pool.map(|p| p.1),
            remaining: pool.map(|p| p.2),
        });
    }

    fn finish(self, k: u32, started: Instant) -> Result<PipelineOutcome> {
        let forward = self
            .records
            .iter()
            .rev()
            .find(|r| r.role == Role::Forward)
            .expect("forward model trained");
        let report = PipelineReport {
            schema_version: REPORT_SCHEMA_VERSION,
            strategy: self.cfg.strategy,
            k,
            seed: self.cfg.seed,
            total_models: self.records.len() as u64,
            total_steps: self.total_steps,
            forward_training_pairs: self.forward_pairs,
            forward_dev_bleu: forward.dev_bleu,
            forward_test_bleu: forward.test_bleu,
            models: self.records,
            iterations: self.iterations,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &self.store.dir {
            let path = dir.join("report.json");
            fs::write(&path, report.to_json()).map_err(io_err(&path))?;
        }
        Ok(PipelineOutcome {
            models: self.models,
            report,
        })
    }
}

fn check_inputs(cfg: &PipelineConfig, data: &PipelineData) -> Result<()> {
    cfg.validate()?;
    if data.authentic.is_empty() {
        return Err(PipelineError::Config("authentic parallel data is empty".into()));
    }
    if !data.authentic.all_kind(crate::corpus::ProvenanceKind::Authentic) {
        return Err(PipelineError::Config("authentic data contains synthetic pairs".into()));
    }
    if data.dev.is_empty() {
        return Err(PipelineError::Config("dev set is empty".into()));
    }
    if data.mono_target.is_empty() {
        return Err(PipelineError::Config("target monolingual data is empty".into()));
    }
    if cfg.strategy.needs_source_mono() && data.mono_source.as_ref().map_or(true, |m| m.is_empty()) {
        return Err(PipelineError::Config(
            "iterative back-translation needs source-side monolingual data".into(),
        ));
    }
    Ok(())
}

/// Runs the configured strategy, persisting into `dir` when given.
pub fn run_experiment(cfg: &PipelineConfig, data: &PipelineData, dir: Option<&Path>, opts: &RunOptions) -> Result<PipelineOutcome> {
    check_inputs(cfg, data)?;
    let started = Instant::now();
    let store = Store::open(dir, cfg, opts)?;
    let mut run = Run::new(cfg, data, store)?;
    let k = match cfg.strategy {
        Strategy::StandardBt => standard_bt(&mut run)?,
        Strategy::SlBt => self_learning(&mut run, 0, None)?,
        Strategy::SlQeBt => self_learning(&mut run, 0, cfg.qe_fraction)?,
        Strategy::IterSlBt => self_learning(&mut run, cfg.k, None)?,
        Strategy::IterSlQeBt => iterative_qe(&mut run)?,
        Strategy::IterBt => iterative_bt(&mut run)?,
    };
    let outcome = run.finish(k, started)?;
    outcome
        .report
        .validate(data.authentic.len(), data.mono_target.len())?;
    Ok(outcome)
}

/// Backward model on the authentic data, then a forward model pretrained on
/// its back-translations of the target monolingual data.
fn standard_bt(run: &mut Run<'_>) -> Result<u32> {
    let mono = run.data.mono_target.sentences();
    let b0 = run.train("backward_0", Role::Backward, 0, None)?;
    run.record_iteration(b0, None);
    let (synthetic, _) = run.synthesize(b0, mono)?;
    run.train("forward", Role::Forward, 0, Some(&synthetic))?;
    Ok(0)
}

/// Self-learning with `k` extra rounds: each backward model is pretrained on
/// its predecessor's translations of the monolingual data (optionally QE
/// filtered), then fine-tuned on the authentic data.
fn self_learning(run: &mut Run<'_>, k: u32, qe: Option<Fraction>) -> Result<u32> {
    let mono = run.data.mono_target.sentences();
    let all: Vec<usize> = (0..mono.len()).collect();
    let mut current = run.train("backward_0", Role::Backward, 0, None)?;
    run.record_iteration(current, None);
    let (mut synthetic, mut conf) = run.synthesize(current, mono)?;
    let mut done = 0;
    for i in 1..=k + 1 {
        let training = match qe {
            Some(f) => run.select(&synthetic, &conf, &all, f.ceil_of(mono.len()))?.0,
            None => synthetic.clone(),
        };
        let previous_dev = run.records[current].dev_bleu;
        current = run.train(&format!("backward_{i}"), Role::Backward, i, Some(&training))?;
        run.record_iteration(current, None);
        (synthetic, conf) = run.synthesize(current, mono)?;
        done = i;
        let gain = run.records[current].dev_bleu - previous_dev;
        if run.cfg.convergence_stop && i <= k && gain < run.cfg.schedule.stop_threshold {
            log::info!("backward_{i} gained {gain:.2} BLEU; stopping self-learning");
            break;
        }
    }
    run.train("forward", Role::Forward, 0, Some(&synthetic))?;
    Ok(done - 1)
}

/// Iterative self-learning with QE: each round translates the unselected
/// pool, moves the best `ceil(fraction * |mono|)` pairs into the training
/// set and trains a fresh backward model on everything selected so far.
fn iterative_qe(run: &mut Run<'_>) -> Result<u32> {
    let fraction = run.cfg.qe_fraction.expect("validated");
    let mono = run.data.mono_target.sentences();
    let n = fraction.ceil_of(mono.len());
    let mut pool: Vec<usize> = (0..mono.len()).collect();
    let mut selected: Vec<SentencePair> = Vec::new();
    let mut current = run.train("backward_0", Role::Backward, 0, None)?;
    let mut round = 0u32;
    while !pool.is_empty() {
        let sentences: Vec<Sentence> = pool.iter().map(|&i| mono[i].clone()).collect();
        let (synthetic, conf) = run.synthesize(current, &sentences)?;
        let (chosen_corpus, chosen) = run.select(&synthetic, &conf, &pool, n)?;
        if chosen.is_empty() {
            return Err(PipelineError::NoProgress {
                iteration: round,
                pool: pool.len(),
            });
        }
        let before = pool.len();
        let taken: std::collections::BTreeSet<usize> = chosen.iter().map(|&k| pool[k]).collect();
        pool.retain(|i| !taken.contains(i));
        selected.extend(chosen_corpus.into_pairs());
        run.record_iteration(current, Some((before, chosen.len(), pool.len())));
        round += 1;
        let training = ParallelCorpus::new(format!("selected{round}"), selected.clone()).map_err(|source| {
            PipelineError::Corpus {
                stage: format!("select round {round}"),
                source,
            }
        })?;
        current = run.train(&format!("backward_{round}"), Role::Backward, round, Some(&training))?;
    }
    run.record_iteration(current, None);
    let (synthetic, _) = run.synthesize(current, mono)?;
    run.train("forward", Role::Forward, 0, Some(&synthetic))?;
    Ok(round - 1)
}

/// Alternating back-translation: backward models improve the forward model
/// through target monolingual data and forward models improve the backward
/// model through source monolingual data.
fn iterative_bt(run: &mut Run<'_>) -> Result<u32> {
    let mono_tgt = run.data.mono_target.sentences();
    let mono_src = run.data.mono_source.as_ref().expect("checked").sentences();
    let mut backward = run.train("backward_0", Role::Backward, 0, None)?;
    run.record_iteration(backward, None);
    let (syn, _) = run.synthesize(backward, mono_tgt)?;
    let mut forward = run.train("forward_0", Role::Forward, 0, Some(&syn))?;
    for i in 1..=run.cfg.k {
        let (syn_src, _) = run.synthesize(forward, mono_src)?;
        backward = run.train(&format!("backward_{i}"), Role::Backward, i, Some(&syn_src))?;
        run.record_iteration(backward, None);
        let (syn, _) = run.synthesize(backward, mono_tgt)?;
        forward = run.train(&format!("forward_{i}"), Role::Forward, i, Some(&syn))?;
    }
    Ok(run.cfg.k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_the_closed_forms() {
        assert_eq!(model_count(Strategy::IterBt, 2), 6);
        assert_eq!(model_count(Strategy::IterSlBt, 2), 5);
        assert_eq!(model_count(Strategy::IterSlBt, 0), 3);
        assert_eq!(model_count(Strategy::StandardBt, 7), 2);
        for k in 0..20 {
            let diff = model_count(Strategy::IterBt, k) as i64 - model_count(Strategy::IterSlBt, k) as i64;
            assert_eq!(diff, k as i64 - 1);
        }
        assert!(model_count_by_name("iter_xx", 1).is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }

    #[test]
    fn qe_fraction_is_required_exactly_for_qe_strategies() {
        let mut cfg = PipelineConfig {
            strategy: Strategy::SlQeBt,
            ..PipelineConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.qe_fraction = Some(Fraction::ONE_THIRD);
        assert!(cfg.validate().is_ok());
        cfg.strategy = Strategy::SlBt;
        assert!(cfg.validate().is_err());
    }
}
