use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use urdu_parseq::checkpoint::{Checkpoint, CheckpointError};
use urdu_parseq::config::{ConfigError, RunConfig};
use urdu_parseq::exec::{limit_threads, Execution};
use urdu_parseq::gradcheck::run_gradcheck;
use urdu_parseq::imaging::{load_manifest, read_pgm, synthesize, write_dataset, ImagingError, Preprocess};
use urdu_parseq::lexicon::demo_lexicon;
use urdu_parseq::model::{DecodeMode, ModelError, Recognizer, RecognizerConfig};
use urdu_parseq::shaping::{GlyphVocabulary, ShapingError};
use urdu_parseq::tensor::OpKind;
use urdu_parseq::train::{evaluate, load_run_data, prepare_image, run_training, Dataset, TrainError};

const MAX_THREADS: usize = 4;

#[derive(Parser)]
#[command(name = "urdu-parseq", version, about = "Printed Urdu word recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ar,
    Nar,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic word dataset: manifest, PGM images and vocabulary.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Run config whose image geometry is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// One word per line; the built-in demo lexicon otherwise.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Train from a run config, optionally resuming a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the validation manifest (or `--manifest`).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Report file; the config's `report` path otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        refine: Option<usize>,
    },
    /// Print the word recognized in one PGM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        /// Run config supplying preprocessing and decode mode.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        refine: Option<usize>,
    },
    /// Finite-difference check of every backward rule and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Negate one backward rule, to confirm the check catches it.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("gradient check failed")]
    GradcheckFailed,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        const USAGE: u8 = 1;
        const IO: u8 = 2;
        const NUMERIC: u8 = 3;
        let imaging = |e: &ImagingError| match e {
            ImagingError::InvalidParameter(_) | ImagingError::Shaping(_) => USAGE,
            _ => IO,
        };
        let checkpoint = |e: &CheckpointError| match e {
            CheckpointError::Model(_) => USAGE,
            _ => IO,
        };
        let config = |e: &ConfigError| match e {
            ConfigError::Io { .. } => IO,
            _ => USAGE,
        };
        match self {
            CliError::Usage(_) | CliError::Shaping(_) | CliError::Model(_) => USAGE,
            CliError::Config(e) => config(e),
            CliError::Imaging(e) => imaging(e),
            CliError::Checkpoint(e) => checkpoint(e),
            CliError::Io { .. } => IO,
            CliError::GradcheckFailed => NUMERIC,
            CliError::Train(e) => match e {
                TrainError::Config(e) => config(e),
                TrainError::Imaging(e) => imaging(e),
                TrainError::Checkpoint(e) => checkpoint(e),
                TrainError::Io { .. } => IO,
                TrainError::NonFiniteLoss { .. } => NUMERIC,
                _ => USAGE,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn resolve_mode(configured: DecodeMode, mode: Option<Mode>, refine: Option<usize>) -> Result<DecodeMode, CliError> {
    let configured_refine = match configured {
        DecodeMode::NonAutoregressive { refine } => Some(refine),
        DecodeMode::Autoregressive => None,
    };
    match (mode, refine) {
        (Some(Mode::Ar), Some(_)) => Err(CliError::Usage("--refine only applies to --mode nar".into())),
        (Some(Mode::Ar), None) => Ok(DecodeMode::Autoregressive),
        (Some(Mode::Nar), r) => Ok(DecodeMode::NonAutoregressive {
            refine: r.or(configured_refine).unwrap_or(1),
        }),
        (None, Some(r)) if configured_refine.is_some() => Ok(DecodeMode::NonAutoregressive { refine: r }),
        (None, Some(_)) => Err(CliError::Usage("--refine needs --mode nar".into())),
        (None, None) => Ok(configured),
    }
}

fn read_lexicon(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn cmd_synth(
    out: &Path,
    samples: usize,
    seed: u64,
    config: Option<&Path>,
    lexicon: Option<&Path>,
) -> Result<(), CliError> {
    let model = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => RecognizerConfig::default(),
    };
    let words: Vec<String> = match lexicon {
        Some(p) => read_lexicon(p)?,
        None => demo_lexicon().iter().map(|w| w.to_string()).collect(),
    };
    let words: Vec<&str> = words.iter().map(String::as_str).collect();
    let vocab = GlyphVocabulary::build(words.iter().copied())?;
    let data = synthesize(&words, samples, seed, model.image_width, model.image_height)?;
    let manifest = write_dataset(out, &data)?;
    let vocab_path = out.join("vocab.tsv");
    fs::write(&vocab_path, vocab.to_listing()).map_err(io_err(&vocab_path))?;
    println!("{}\t{} samples", manifest.display(), data.len());
    Ok(())
}

fn cmd_train(config: &Path, checkpoint: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let resume = checkpoint.map(Checkpoint::load).transpose()?;
    let data = load_run_data(&cfg)?;
    let outcome = run_training(&cfg, &data, resume, Execution::Parallel, |v| {
        println!(
            "{}\tword_accuracy={:.6}",
            v.log_line(),
            v.report.word_accuracy
        );
    })?;
    eprintln!(
        "trained to step {}; checkpoints in {}",
        outcome.state.step,
        cfg.checkpoint_dir.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Recognizer, GlyphVocabulary), CliError> {
    let ck = Checkpoint::load(path)?;
    let model = Recognizer::from_params(ck.config, ck.params)?;
    Ok((model, ck.vocab))
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    manifest: Option<&Path>,
    out: Option<&Path>,
    mode: Option<Mode>,
    refine: Option<usize>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let mode = resolve_mode(cfg.decode_mode, mode, refine)?;
    let manifest = match manifest {
        Some(p) => p.to_path_buf(),
        None => cfg
            .val_manifest
            .clone()
            .ok_or(ConfigError::Missing("val_manifest"))?,
    };
    let (model, vocab) = load_model(checkpoint)?;
    let samples = load_manifest(&manifest)?;
    let data = Dataset::prepare(samples, &vocab, model.config(), &cfg.preprocess)?;
    let report = evaluate(&model, &vocab, &data, mode, Execution::Parallel)?;
    let out = out.unwrap_or(&cfg.report);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(out).map_err(io_err(out))?;
    let mut w = BufWriter::new(file);
    report.write_to(&mut w).map_err(io_err(out))?;
    w.flush().map_err(io_err(out))?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    image: &Path,
    config: Option<&Path>,
    mode: Option<Mode>,
    refine: Option<usize>,
) -> Result<(), CliError> {
    let (preprocess, configured) = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            (cfg.preprocess, cfg.decode_mode)
        }
        None => (Preprocess::default(), DecodeMode::Autoregressive),
    };
    let mode = resolve_mode(configured, mode, refine)?;
    let (model, vocab) = load_model(checkpoint)?;
    let img = prepare_image(&read_pgm(image)?, model.config(), &preprocess)?;
    let ids = model.recognize(&img, mode)?;
    println!("{}", vocab.decode(&ids)?);
    Ok(())
}

fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> Result<(), CliError> {
    let fault = fault
        .map(|name| {
            OpKind::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown op {name:?}")))
        })
        .transpose()?;
    let report = run_gradcheck(seed, fault)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    limit_threads(MAX_THREADS);
    match cli.command {
        Command::Synth {
            out,
            samples,
            seed,
            config,
            lexicon,
        } => cmd_synth(&out, samples, seed, config.as_deref(), lexicon.as_deref()),
        Command::Train {
            config,
            checkpoint,
            seed,
        } => cmd_train(&config, checkpoint.as_deref(), seed),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            out,
            mode,
            refine,
        } => cmd_eval(&config, &checkpoint, manifest.as_deref(), out.as_deref(), mode, refine),
        Command::Infer {
            checkpoint,
            image,
            config,
            mode,
            refine,
        } => cmd_infer(&checkpoint, &image, config.as_deref(), mode, refine),
        Command::Gradcheck { seed, fault } => cmd_gradcheck(seed, fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
