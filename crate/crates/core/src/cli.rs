//! `mmtitlegen` command line: synth, train, generate, evaluate, abmetrics.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::corpus::{
    load_corpus, load_generated, save_corpus, save_generated, synth_corpus, CorpusStats,
    SynthOptions, Vocabulary,
};
use crate::encoder::ModelInput;
use crate::error::Error;
use crate::eval::{ctr_cvr, evaluate_corpus, evaluate_pairs, load_click_log, GreedyTitler, RougeVariant};
use crate::generator::strip_eos;
use crate::trainer::{prepare_examples, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mmtitlegen", version, about = "Short product title generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenerateMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    F1,
    Recall,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, env = "MMTITLEGEN_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of distinct words titles and tags are drawn from.
        #[arg(long, default_value_t = 200)]
        vocab_size: usize,
        #[arg(long, default_value_t = 16)]
        image_dim: usize,
    },
    /// Pretrain both models, then run adversarial training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long, env = "MMTITLEGEN_SEED")]
        seed: Option<u64>,
    },
    /// Decode a short title for every record.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = GenerateMode::Greedy)]
        mode: GenerateMode,
        #[arg(long, env = "MMTITLEGEN_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// ROUGE report against gold short titles. Without a checkpoint the
    /// records' `generated_short_title` fields are scored.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::F1)]
        variant: VariantArg,
        /// Include per-record scores.
        #[arg(long)]
        per_record: bool,
    },
    /// Pooled CTR and CVR from a click log CSV.
    Abmetrics {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub code_version: String,
    pub wallclock_s: f64,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

fn data(error: Error) -> Failure {
    Failure { code: EXIT_DATA, error }
}

fn runtime(error: Error) -> Failure {
    Failure { code: EXIT_RUNTIME, error }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: Error::invalid(msg),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| runtime(Error::data(e.to_string())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(Error::io(path, e)))
}

struct ManifestBuilder {
    command: &'static str,
    started: Instant,
    config_path: Option<String>,
    seed: Option<u64>,
    inputs: Vec<String>,
}

impl ManifestBuilder {
    fn new(command: &'static str, seed: Option<u64>, inputs: &[&Path]) -> Self {
        ManifestBuilder {
            command,
            started: Instant::now(),
            config_path: None,
            seed,
            inputs: inputs.iter().map(|p| display(p)).collect(),
        }
    }

    fn finish(self, at: &Path, outputs: &[&Path]) -> CmdResult {
        let m = RunManifest {
            command: self.command.to_string(),
            config_path: self.config_path,
            seed: self.seed,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| display(p)).collect(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wallclock_s: self.started.elapsed().as_secs_f64(),
        };
        write_json(at, &m)
    }
}

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(data(Error::data(format!("{}: no such file", path.display()))))
    }
}

fn cmd_synth(n: usize, seed: u64, out: &Path, vocab_size: usize, image_dim: usize) -> CmdResult {
    if n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    if vocab_size < 2 {
        return Err(usage("--vocab-size must be >= 2"));
    }
    let manifest = ManifestBuilder::new("synth", Some(seed), &[]);
    let mut opts = SynthOptions::new(n, seed, CorpusStats::reference(), vocab_size);
    opts.image_dim = image_dim;
    let records = synth_corpus(&opts);
    save_corpus(&records, out).map_err(runtime)?;
    manifest.finish(&manifest_path_for(out), &[out])
}

fn cmd_train(
    config_path: Option<&Path>,
    corpus: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
) -> CmdResult {
    require_file(corpus)?;
    if let Some(p) = config_path {
        require_file(p)?;
    }
    if let Some(p) = resume {
        require_file(p)?;
    }
    let checkpoint = resume.map(ModelCheckpoint::load).transpose().map_err(data)?;
    let mut config = match (config_path, &checkpoint) {
        (Some(p), _) => TrainConfig::load(p).map_err(data)?,
        (None, Some(c)) => c.config.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(data)?;
    let records = load_corpus(corpus).map_err(data)?;
    if records.is_empty() {
        return Err(data(Error::data(format!("{}: corpus is empty", corpus.display()))));
    }

    let mut inputs = vec![corpus];
    if let Some(p) = resume {
        inputs.push(p);
    }
    let mut manifest = ManifestBuilder::new("train", Some(config.seed), &inputs);
    manifest.config_path = config_path.map(display);

    let mut trainer = match checkpoint {
        Some(c) => c.into_trainer_with(config.clone()).map_err(data)?,
        None => {
            let vocab = Vocabulary::build(&records, config.min_frequency, config.vocab_max_size)
                .map_err(data)?;
            Trainer::new(config.clone(), vocab).map_err(data)?
        }
    };
    let source = config.image_source.build(config.image_dim, None).map_err(data)?;
    let examples = prepare_examples(&records, trainer.vocab(), &source, &config).map_err(data)?;

    fs::create_dir_all(out).map_err(|e| runtime(Error::io(out, e)))?;
    let ckpt_path = out.join("checkpoint.json");
    let metrics_path = out.join("metrics.jsonl");
    let vocab_path = out.join("vocab.txt");
    trainer.vocab().save(&vocab_path).map_err(runtime)?;
    let metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| runtime(Error::io(&metrics_path, e)))?;
    let mut metrics = std::io::BufWriter::new(metrics_file);

    let every = config.checkpoint_every;
    trainer
        .train(&examples, |t, m| {
            let line = serde_json::to_string(m).expect("metrics serialise");
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            if every > 0 && m.iter % every == 0 {
                ModelCheckpoint::from_trainer(t).save(&ckpt_path)?;
            }
            Ok(())
        })
        .map_err(runtime)?;
    drop(metrics);
    ModelCheckpoint::from_trainer(&trainer)
        .save(&ckpt_path)
        .map_err(runtime)?;
    let p = trainer.progress();
    println!(
        "trained: {} G-pretrain, {} D-pretrain, {} adversarial steps -> {}",
        p.g_pretrain,
        p.d_pretrain,
        p.iteration,
        ckpt_path.display()
    );
    manifest.finish(&out.join("manifest.json"), &[&ckpt_path, &metrics_path, &vocab_path])
}

fn load_model(checkpoint: &Path) -> std::result::Result<Trainer, Failure> {
    require_file(checkpoint)?;
    ModelCheckpoint::load(checkpoint)
        .and_then(ModelCheckpoint::into_trainer)
        .map_err(data)
}

fn cmd_generate(checkpoint: &Path, input: &Path, out: &Path, mode: GenerateMode, seed: u64) -> CmdResult {
    require_file(input)?;
    let trainer = load_model(checkpoint)?;
    let manifest_seed = (mode == GenerateMode::Sample).then_some(seed);
    let manifest = ManifestBuilder::new("generate", manifest_seed, &[checkpoint, input]);
    let records = load_corpus(input).map_err(data)?;
    let cfg = trainer.config();
    let source = cfg.image_source.build(cfg.image_dim, None).map_err(data)?;
    let g = trainer.generator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let input = ModelInput::from_record(&r, trainer.vocab(), &source, &g.config().encoder).map_err(data)?;
        let enc = g.encode(&input).map_err(data)?;
        let trace = match mode {
            GenerateMode::Greedy => g.greedy_decode(&enc),
            GenerateMode::Sample => g.sample_sequence_seeded(&enc, rng.gen()),
        };
        let title = trainer.vocab().decode(strip_eos(&trace.ids)).map_err(runtime)?;
        rows.push((r, title));
    }
    save_generated(&rows, out).map_err(runtime)?;
    manifest.finish(&manifest_path_for(out), &[out])
}

fn cmd_evaluate(
    checkpoint: Option<&Path>,
    test: &Path,
    out: &Path,
    variant: RougeVariant,
    per_record: bool,
) -> CmdResult {
    require_file(test)?;
    let mut inputs = vec![test];
    inputs.extend(checkpoint);
    let manifest = ManifestBuilder::new("evaluate", None, &inputs);
    let mut report = match checkpoint {
        Some(c) => {
            let trainer = load_model(c)?;
            let records = load_corpus(test).map_err(data)?;
            let cfg = trainer.config();
            let source = cfg.image_source.build(cfg.image_dim, None).map_err(data)?;
            let titler = GreedyTitler {
                generator: trainer.generator(),
                vocab: trainer.vocab(),
                source: &source,
            };
            evaluate_corpus(&titler, &records, variant).map_err(data)?
        }
        None => {
            let rows = load_generated(test).map_err(data)?;
            let mut records = Vec::with_capacity(rows.len());
            let mut titles = Vec::with_capacity(rows.len());
            for (i, (r, g)) in rows.into_iter().enumerate() {
                let g = g.ok_or_else(|| {
                    data(Error::data(format!(
                        "record {} has no generated_short_title; pass --checkpoint",
                        i + 1
                    )))
                })?;
                records.push(r);
                titles.push(g);
            }
            evaluate_pairs(&records, &titles, variant).map_err(data)?
        }
    };
    if !per_record {
        report.per_pair.clear();
    }
    write_json(out, &report)?;
    manifest.finish(&manifest_path_for(out), &[out])
}

fn cmd_abmetrics(log: &Path, out: &Path) -> CmdResult {
    require_file(log)?;
    let manifest = ManifestBuilder::new("abmetrics", None, &[log]);
    let rows = load_click_log(log).map_err(data)?;
    write_json(out, &ctr_cvr(&rows))?;
    manifest.finish(&manifest_path_for(out), &[out])
}

pub fn execute(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth {
            n,
            seed,
            out,
            vocab_size,
            image_dim,
        } => cmd_synth(n, seed, &out, vocab_size, image_dim),
        Command::Train {
            config,
            corpus,
            out,
            resume,
            seed,
        } => cmd_train(config.as_deref(), &corpus, &out, resume.as_deref(), seed),
        Command::Generate {
            checkpoint,
            input,
            out,
            mode,
            seed,
        } => cmd_generate(&checkpoint, &input, &out, mode, seed),
        Command::Evaluate {
            checkpoint,
            test,
            out,
            variant,
            per_record,
        } => {
            let v = match variant {
                VariantArg::F1 => RougeVariant::F1,
                VariantArg::Recall => RougeVariant::Recall,
            };
            cmd_evaluate(checkpoint.as_deref(), &test, &out, v, per_record)
        }
        Command::Abmetrics { log, out } => cmd_abmetrics(&log, &out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}
