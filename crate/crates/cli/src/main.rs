use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mabsa::checkpoint::{load_checkpoint, save_checkpoint};
use mabsa::config::RunConfig;
use mabsa::data::{extract_spans, gen_synthetic, load_jsonl, save_jsonl, SyntheticConfig};
use mabsa::diagnostics::{gradcheck_suite, inspect};
use mabsa::trainer::{evaluate, train, Model};
use mabsa::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mabsa", version, about = "Multimodal aspect-based sentiment tagger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic JSONL corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take vocabulary, sentence and image sizes from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluated after every epoch.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON log; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print micro precision, recall and F1 as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print predicted labels and aspect spans per sentence as JSON.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump transport plan, attention rows and task weights for one example.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

#[derive(Serialize)]
struct Prediction {
    index: usize,
    labels: Vec<&'static str>,
    spans: Vec<mabsa::data::AspectSpan>,
}

/// `Ok(false)` means the command ran but its check failed.
fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::GenData { out, n, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = gen_synthetic(&SyntheticConfig::for_encoders(&cfg.text, &cfg.image, n, seed))?;
            save_jsonl(&out, &corpus)?;
        }
        Command::Train {
            config,
            data,
            dev,
            out,
            log,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let train_set = load_jsonl(&data)?;
            let dev_set = dev.map(load_jsonl).transpose()?;
            let model = Model::new(&cfg.model(), cfg.train.switches(), cfg.train.seed)?;
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?)),
                None => Box::new(io::stdout().lock()),
            };
            let (model, _) = train(model, &cfg.train, &train_set, dev_set.as_deref(), Some(&mut *sink))?;
            sink.flush()
                .map_err(|e| io_error(log.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
            save_checkpoint(&out, &model, &cfg)?;
        }
        Command::Eval { checkpoint, data } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let set = load_jsonl(&data)?;
            print_json(&evaluate(&model, &set)?)?;
        }
        Command::Predict { checkpoint, data } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let set = load_jsonl(&data)?;
            let out: Vec<Prediction> = model
                .predict(&set)?
                .into_iter()
                .enumerate()
                .map(|(index, labels)| Prediction {
                    index,
                    spans: extract_spans(&labels),
                    labels: labels.iter().map(|l| l.as_str()).collect(),
                })
                .collect();
            print_json(&out)?;
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck_suite(seed)?;
            for m in &report.modules {
                eprintln!(
                    "{:<10} {} checks, {} parameter groups, {} coordinates, max error {:.2e}: {}",
                    m.module,
                    m.checks,
                    m.groups,
                    m.coordinates,
                    m.max_error,
                    if m.passed { "pass" } else { "FAIL" }
                );
            }
            print_json(&report)?;
            return Ok(report.passed);
        }
        Command::Inspect {
            checkpoint,
            data,
            index,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let set = load_jsonl(&data)?;
            let ex = set.get(index).ok_or_else(|| {
                Error::Data(format!(
                    "index {index} out of range for {} examples in {}",
                    set.len(),
                    data.display()
                ))
            })?;
            print_json(&inspect(&model, ex, index)?)?;
        }
    }
    Ok(true)
}

fn io_error(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
