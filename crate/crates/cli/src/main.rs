mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use backtrans::corpus::{
    generate_source_monolingual, generate_synthetic_language, load_monolingual, load_parallel, split,
    MonolingualCorpus, ParallelCorpus, Provenance, Sentence, SyntheticOracle, TokenizeOptions,
};
use backtrans::metrics::{corpus_bleu, paired_bootstrap};
use backtrans::model::{Direction, TranslationModel};
use backtrans::pipelines::{model_count, run_experiment, PipelineData, RunOptions};
use backtrans::subword::{learn_bpe, BpeCodec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{keys_help, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "backtrans", version, about = "Back-translation and self-learning pipelines for low-resource MT")]
#[command(after_long_help = keys_help(), after_help = keys_help())]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set schedule.max_steps=20 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Global RNG seed (overrides `seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root (overrides `output` and $BACKTRANS_OUTPUT)
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic language: parallel corpus, monolingual text and the oracle
    GenData {
        /// Existing directory to write into
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a single model on authentic data
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = Side::Forward)]
        direction: Side,
        /// Model file to write
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Translate a file line by line with a saved model
    Translate {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Hypotheses file (default: stdout)
        #[arg(long = "out", value_name = "PATH")]
        out: Option<PathBuf>,
        /// Also write `index<TAB>confidence` lines here
        #[arg(long, value_name = "PATH")]
        scores: Option<PathBuf>,
    },
    /// Run a full augmentation pipeline
    Pipeline {
        #[command(flatten)]
        data: DataArgs,
        /// Overrides `pipeline.strategy`
        #[arg(long)]
        strategy: Option<String>,
        /// Overrides `pipeline.k`
        #[arg(long)]
        k: Option<u32>,
        /// Overrides `pipeline.qe_fraction`
        #[arg(long, value_name = "FRACTION")]
        qe_fraction: Option<String>,
        /// Experiment directory (default: <output>/<strategy>-seed<seed>)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Continue an interrupted run in the same directory
        #[arg(long)]
        resume: bool,
        /// Print the training plan without training
        #[arg(long)]
        dry_run: bool,
    },
    /// Corpus BLEU of a hypothesis file as JSON
    Evaluate {
        #[arg(long, value_name = "PATH")]
        candidates: PathBuf,
        #[arg(long, value_name = "PATH")]
        references: PathBuf,
    },
    /// Paired bootstrap over the sample-size grid, as CSV
    Significance {
        #[arg(long, value_name = "PATH")]
        a: PathBuf,
        #[arg(long, value_name = "PATH")]
        b: PathBuf,
        #[arg(long, value_name = "PATH")]
        references: PathBuf,
    },
    /// Print the effective configuration (file, overrides and flags applied) as TOML
    Config,
    /// Learn or apply a BPE codec
    Bpe {
        #[command(subcommand)]
        action: BpeAction,
    },
}

#[derive(Subcommand, Debug)]
enum BpeAction {
    /// Learn merges from one or more text files
    Learn {
        #[arg(long, required = true, num_args = 1.., value_name = "PATH")]
        input: Vec<PathBuf>,
        /// Overrides `pipeline.bpe_merges`
        #[arg(long)]
        merges: Option<usize>,
        #[arg(long = "codec", value_name = "PATH")]
        codec: PathBuf,
    },
    /// Segment a text file with a learned codec
    Apply {
        #[arg(long, value_name = "PATH")]
        codec: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Segmented file (default: stdout)
        #[arg(long = "out", value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory written by gen-data (or laid out the same way); generated
    /// in memory from the [data] section when absent
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Side {
    Forward,
    Backward,
}

const PARALLEL_SRC: &str = "parallel.src";
const PARALLEL_TGT: &str = "parallel.tgt";
const MONO_TGT: &str = "mono.tgt";
const MONO_SRC: &str = "mono.src";
const ORACLE: &str = "oracle.tsv";

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.output {
        overrides.push(format!("output={}", toml::Value::String(out.display().to_string())));
    }
    if let Command::Pipeline {
        strategy,
        k,
        qe_fraction,
        ..
    } = &cli.command
    {
        if let Some(s) = strategy {
            overrides.push(format!("pipeline.strategy={}", toml::Value::String(s.clone())));
        }
        if let Some(k) = k {
            overrides.push(format!("pipeline.k={k}"));
        }
        if let Some(f) = qe_fraction {
            overrides.push(format!("pipeline.qe_fraction={}", toml::Value::String(f.clone())));
        }
    }
    if let Command::Bpe {
        action: BpeAction::Learn { merges: Some(m), .. },
    } = &cli.command
    {
        overrides.push(format!("pipeline.bpe_merges={m}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::Train { data, direction, model } => train(&cfg, data.data.as_deref(), direction, &model),
        Command::Translate {
            model,
            input,
            out,
            scores,
        } => translate(&model, &input, out.as_deref(), scores.as_deref()),
        Command::Pipeline {
            data,
            out,
            resume,
            dry_run,
            ..
        } => pipeline(&cfg, data.data.as_deref(), out, resume, dry_run),
        Command::Config => {
            print!("{}", toml::to_string(&cfg)?);
            Ok(())
        }
        Command::Evaluate { candidates, references } => evaluate(&candidates, &references),
        Command::Significance { a, b, references } => significance(&cfg, &a, &b, &references),
        Command::Bpe { action } => match action {
            BpeAction::Learn { input, codec, .. } => bpe_learn(&cfg, &input, &codec),
            BpeAction::Apply { codec, input, out } => bpe_apply(&codec, &input, out.as_deref()),
        },
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure!(out.is_dir(), "output directory {} does not exist", out.display());
    let spec = cfg.data.spec(cfg.seed);
    let (parallel, mono, oracle) = generate_synthetic_language(&spec, cfg.data.n_parallel, cfg.data.n_mono)?;
    parallel.write_files(&out.join(PARALLEL_SRC), &out.join(PARALLEL_TGT))?;
    mono.write_file(&out.join(MONO_TGT))?;
    write(&out.join(ORACLE), &oracle.to_text())?;
    if cfg.data.n_source_mono > 0 {
        generate_source_monolingual(&spec, cfg.data.n_source_mono, &parallel)?.write_file(&out.join(MONO_SRC))?;
    }
    println!(
        "wrote {} parallel pairs, {} monolingual sentences and the oracle to {}",
        parallel.len(),
        mono.len(),
        out.display()
    );
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| Sentence::parse(l, TokenizeOptions::default())).collect())
}

/// Parallel, monolingual and (when available) oracle data, split into
/// train/dev/test.
fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<PipelineData> {
    let opts = TokenizeOptions::default();
    let (parallel, mono, mono_source, oracle): (ParallelCorpus, MonolingualCorpus, Option<MonolingualCorpus>, Option<SyntheticOracle>) =
        match dir {
            Some(dir) => {
                let (parallel, _) =
                    load_parallel(&dir.join(PARALLEL_SRC), &dir.join(PARALLEL_TGT), Provenance::Authentic, opts)?;
                let (mono, _) = load_monolingual(&dir.join(MONO_TGT), "tgt", opts)?;
                let mono_source = match dir.join(MONO_SRC) {
                    p if p.exists() => Some(load_monolingual(&p, "src", opts)?.0),
                    _ => None,
                };
                let oracle = match dir.join(ORACLE) {
                    p if p.exists() => Some(SyntheticOracle::parse(&fs::read_to_string(&p)?)?),
                    _ => None,
                };
                (parallel, mono, mono_source, oracle)
            }
            None => {
                let spec = cfg.data.spec(cfg.seed);
                let (parallel, mono, oracle) = generate_synthetic_language(&spec, cfg.data.n_parallel, cfg.data.n_mono)?;
                let mono_source = (cfg.data.n_source_mono > 0)
                    .then(|| generate_source_monolingual(&spec, cfg.data.n_source_mono, &parallel))
                    .transpose()?;
                (parallel, mono, mono_source, Some(oracle))
            }
        };
    let (train, dev, test) = split(&parallel, cfg.data.dev_fraction, cfg.data.test_fraction, cfg.seed)?;
    Ok(PipelineData {
        authentic: train,
        dev,
        test: (!test.is_empty()).then_some(test),
        mono_target: mono,
        mono_source,
        oracle,
    })
}

fn train(cfg: &RunConfig, data: Option<&Path>, side: Side, model_path: &Path) -> Result<()> {
    let data = load_data(cfg, data)?;
    let direction = match side {
        Side::Forward => Direction::Forward,
        Side::Backward => Direction::Backward,
    };
    let id = model_path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let mut model = TranslationModel::new(id, direction, &cfg.backend, cfg.seed);
    let summary = model.train(&data.authentic, &data.dev, &cfg.schedule)?;
    model.average_checkpoints(cfg.schedule.average_last_k);
    model.save(model_path)?;
    let mut curve = String::from("step,dev_bleu\n");
    for c in model.history() {
        curve.push_str(&format!("{},{:.4}\n", c.step, c.dev_bleu));
    }
    write(&model_path.with_extension("csv"), &curve)?;
    println!("steps\t{}", summary.steps);
    println!("dev_bleu\t{:.2}", model.evaluate(&data.dev)?);
    if let Some(test) = &data.test {
        println!("test_bleu\t{:.2}", model.evaluate(test)?);
    }
    Ok(())
}

fn output_sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn translate(model_path: &Path, input: &Path, out: Option<&Path>, scores: Option<&Path>) -> Result<()> {
    let model = TranslationModel::load(model_path)?;
    let inputs = read_lines(input)?;
    let outputs = model.translate(&inputs)?;
    let mut sink = output_sink(out)?;
    for (s, _) in &outputs {
        writeln!(sink, "{s}")?;
    }
    sink.flush()?;
    if let Some(path) = scores {
        let text: String = outputs.iter().enumerate().map(|(i, (_, c))| format!("{i}\t{c}\n")).collect();
        write(path, &text)?;
    }
    Ok(())
}

fn pipeline(cfg: &RunConfig, data: Option<&Path>, out: Option<PathBuf>, resume: bool, dry_run: bool) -> Result<()> {
    let pc = cfg.pipeline_config();
    if dry_run {
        println!("strategy\t{}\nk\t{}\nmodels\t{}", pc.strategy, pc.k, model_count(pc.strategy, pc.k));
        return Ok(());
    }
    let dir = out.unwrap_or_else(|| cfg.output_root().join(format!("{}-seed{}", pc.strategy, pc.seed)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let data = load_data(cfg, data)?;
    let outcome = run_experiment(&pc, &data, Some(&dir), &RunOptions { resume, halt_after: None })
        .with_context(|| format!("pipeline failed; state kept in {}", dir.display()))?;
    print!("{}", outcome.report.summary_table());
    Ok(())
}

#[derive(Serialize)]
struct EvaluateOutput {
    /// BLEU on the 0–100 scale, two decimals.
    display: String,
    #[serde(flatten)]
    breakdown: backtrans::metrics::BleuBreakdown,
}

fn evaluate(candidates: &Path, references: &Path) -> Result<()> {
    let c = read_lines(candidates)?;
    let r = read_lines(references)?;
    ensure!(
        c.len() == r.len(),
        "{} has {} lines but {} has {}",
        candidates.display(),
        c.len(),
        references.display(),
        r.len()
    );
    let breakdown = corpus_bleu(&c, &r)?;
    let out = EvaluateOutput {
        display: format!("{:.2}", breakdown.points()),
        breakdown,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn significance(cfg: &RunConfig, a: &Path, b: &Path, references: &Path) -> Result<()> {
    let (sa, sb, r) = (read_lines(a)?, read_lines(b)?, read_lines(references)?);
    if cfg.metrics.sample_sizes.is_empty() {
        bail!("metrics.sample_sizes is empty");
    }
    println!("comparison,sample_size,n_resamples,seed,fraction_better,significant");
    for size in &cfg.metrics.sample_sizes {
        for (name, x, y) in [("a>b", &sa, &sb), ("b>a", &sb, &sa)] {
            let res = paired_bootstrap(x, y, &r, *size, cfg.metrics.n_resamples, cfg.seed)?;
            println!(
                "{name},{size},{},{},{:.4},{}",
                res.n_resamples,
                res.rng_seed,
                res.fraction_a_better,
                res.is_significant()
            );
        }
    }
    Ok(())
}

fn bpe_learn(cfg: &RunConfig, inputs: &[PathBuf], codec_path: &Path) -> Result<()> {
    let mut sentences = Vec::new();
    for p in inputs {
        sentences.extend(read_lines(p)?);
    }
    let codec = learn_bpe(&sentences, cfg.pipeline.bpe_merges)?;
    write(codec_path, &codec.to_text())?;
    println!("learned {} merges", codec.merges().len());
    Ok(())
}

fn bpe_apply(codec_path: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let codec = BpeCodec::parse(&fs::read_to_string(codec_path).with_context(|| format!("reading {}", codec_path.display()))?)?;
    let mut sink = output_sink(out)?;
    for s in codec.apply_all(&read_lines(input)?) {
        writeln!(sink, "{s}")?;
    }
    sink.flush()?;
    Ok(())
}
