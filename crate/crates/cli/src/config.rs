//! Run configuration: a TOML file with one table per concern, optionally
//! patched by `--set key=value` overrides and command flags (flags win).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use backtrans::corpus::{SentenceShape, SyntheticLanguageSpec};
use backtrans::metrics::{DEFAULT_RESAMPLES, SAMPLE_SIZE_GRID};
use backtrans::model::{BackendConfig, TrainingSchedule};
use backtrans::pipelines::{BpeMode, PipelineConfig, QeMethod, Strategy};
use backtrans::qe::Fraction;
use backtrans::subword::DEFAULT_MERGES;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "BACKTRANS_OUTPUT";
const DEFAULT_OUTPUT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub data: DataSection,
    pub pipeline: PipelineSection,
    pub schedule: TrainingSchedule,
    pub backend: BackendConfig,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output: None,
            data: DataSection::default(),
            pipeline: PipelineSection::default(),
            schedule: TrainingSchedule::default(),
            backend: BackendConfig::default(),
            metrics: MetricsSection::default(),
        }
    }
}

/// Generated-language shape and corpus sizes, plus how loaded parallel
/// data is split into train/dev/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub vocab_size_src: usize,
    pub vocab_size_tgt: usize,
    pub reorder_window: usize,
    pub noise_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub branching: usize,
    pub zipf_exponent: f64,
    pub n_parallel: usize,
    pub n_mono: usize,
    pub n_source_mono: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = SyntheticLanguageSpec::default();
        Self {
            vocab_size_src: spec.vocab_size_src,
            vocab_size_tgt: spec.vocab_size_tgt,
            reorder_window: spec.reorder_window,
            noise_rate: spec.noise_rate,
            min_len: spec.shape.min_len,
            max_len: spec.shape.max_len,
            branching: spec.shape.branching,
            zipf_exponent: spec.shape.zipf_exponent,
            n_parallel: 6000,
            n_mono: 20000,
            n_source_mono: 0,
            dev_fraction: 500.0 / 6000.0,
            test_fraction: 500.0 / 6000.0,
        }
    }
}

impl DataSection {
    pub fn spec(&self, seed: u64) -> SyntheticLanguageSpec {
        SyntheticLanguageSpec {
            vocab_size_src: self.vocab_size_src,
            vocab_size_tgt: self.vocab_size_tgt,
            reorder_window: self.reorder_window,
            noise_rate: self.noise_rate,
            rng_seed: seed,
            shape: SentenceShape {
                min_len: self.min_len,
                max_len: self.max_len,
                branching: self.branching,
                zipf_exponent: self.zipf_exponent,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub strategy: Strategy,
    pub k: u32,
    pub qe_fraction: Option<Fraction>,
    pub qe_method: QeMethod,
    pub convergence_stop: bool,
    pub bpe: BpeMode,
    pub bpe_merges: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            strategy: p.strategy,
            k: p.k,
            qe_fraction: p.qe_fraction,
            qe_method: p.qe_method,
            convergence_stop: p.convergence_stop,
            bpe: p.bpe,
            bpe_merges: DEFAULT_MERGES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub n_resamples: usize,
    pub sample_sizes: Vec<usize>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            n_resamples: DEFAULT_RESAMPLES,
            sample_sizes: SAMPLE_SIZE_GRID.to_vec(),
        }
    }
}

/// Every documented key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global RNG seed for generation, splitting, training and resampling"),
    ("output", "output root (default: $BACKTRANS_OUTPUT, else ./runs)"),
    ("data.vocab_size_src", "source vocabulary of the generated language"),
    ("data.vocab_size_tgt", "target vocabulary of the generated language"),
    ("data.reorder_window", "local reordering window; 0 keeps word order"),
    ("data.noise_rate", "share of parallel target words replaced at random"),
    ("data.min_len", "shortest generated sentence"),
    ("data.max_len", "longest generated sentence"),
    ("data.branching", "successors per word in the generating bigram chain"),
    ("data.zipf_exponent", "skew of word frequencies"),
    ("data.n_parallel", "parallel pairs to generate (before the dev/test split)"),
    ("data.n_mono", "target-side monolingual sentences to generate"),
    ("data.n_source_mono", "source-side monolingual sentences (needed by iter_bt)"),
    ("data.dev_fraction", "share of parallel pairs held out for dev"),
    ("data.test_fraction", "share of parallel pairs held out for test"),
    ("pipeline.strategy", "standard_bt | sl_bt | sl_qe_bt | iter_sl_qe_bt | iter_sl_bt | iter_bt"),
    ("pipeline.k", "iterations for the iterative strategies"),
    ("pipeline.qe_fraction", "share of synthetic pairs kept by QE, e.g. \"1/3\" (QE strategies only)"),
    ("pipeline.qe_method", "{ kind = model_confidence | oracle | external, path = scores file for external }"),
    ("pipeline.convergence_stop", "stop self-learning early when backward dev BLEU stops improving"),
    ("pipeline.bpe", "off | fixed | relearn"),
    ("pipeline.bpe_merges", "merge operations per learned codec"),
    ("schedule.eval_every", "steps between dev evaluations and checkpoints"),
    ("schedule.stop_window", "evaluations inspected by the stopping rule"),
    ("schedule.stop_threshold", "minimum dev BLEU gain (points) that keeps training going"),
    ("schedule.average_last_k", "trailing checkpoints averaged after each phase"),
    ("schedule.max_steps", "step cap per training phase"),
    ("schedule.batch_size", "sentences per update (attention backend)"),
    ("schedule.learning_rate", "optimizer step size (attention backend)"),
    ("backend.kind", "statistical | attention"),
    ("backend.lm_weight", "statistical: weight of the target bigram model when decoding"),
    ("backend.lm_alpha", "statistical: add-alpha smoothing of the bigram model"),
    ("backend.prior_weight", "statistical: scale on counts carried into the next phase"),
    ("backend.phase_smoothing", "statistical: uniform mass mixed into rows at a phase start"),
    ("backend.decode_prune", "statistical: drop candidates below this share of the row maximum"),
    ("backend.max_candidates", "statistical: candidates kept per input word"),
    ("backend.decoder", "statistical: viterbi | greedy"),
    ("backend.embed_dim", "attention: embedding width"),
    ("backend.hidden_dim", "attention: recurrent state width"),
    ("backend.vocab_size", "attention: per-side vocabulary cap"),
    ("backend.init_scale", "attention: half-width of the uniform initialization"),
    ("backend.clip_norm", "attention: gradient norm clip, 0 disables"),
    ("backend.beam_width", "attention: decoding beam"),
    ("backend.max_length_ratio", "attention: output length cap relative to the input"),
    ("metrics.n_resamples", "bootstrap resamples per significance test"),
    ("metrics.sample_sizes", "bootstrap sample sizes"),
];

/// Text appended to `--help`.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (TOML file via --config, or --set KEY=VALUE):\n");
    for (key, doc) in KEYS {
        out.push_str(&format!("  {key:width$}  {doc}\n"));
    }
    out.push_str(&format!("\nEnvironment:\n  {OUTPUT_ENV}  default output root\n"));
    out
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).context("empty override key")?;
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{part}` in `{key}` is not a table"))?;
    }
    cursor.insert(last.to_owned(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order, and checks the
    /// result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.pipeline_config().validate()?;
        Ok(cfg)
    }

    pub fn from_table(mut table: toml::Table) -> Result<Self> {
        // a backend table without `kind` means the default backend
        if let Some(toml::Value::Table(b)) = table.get_mut("backend") {
            b.entry("kind").or_insert_with(|| toml::Value::String("statistical".into()));
        }
        RunConfig::deserialize(toml::Value::Table(table)).context("invalid configuration")
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            strategy: p.strategy,
            k: p.k,
            qe_fraction: p.qe_fraction,
            qe_method: p.qe_method.clone(),
            schedule: self.schedule,
            backend: self.backend,
            seed: self.seed,
            convergence_stop: p.convergence_stop,
            bpe: p.bpe,
            bpe_merges: p.bpe_merges,
        }
    }

    /// `output`, else the environment default, else `./runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }
}
