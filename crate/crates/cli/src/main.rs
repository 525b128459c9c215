//! `hypogen`: the experimental pipeline as six subcommands.
//!
//! stdout carries the echoed effective config followed by JSON records;
//! everything else goes to stderr. Exit codes: 0 success, 1 usage or
//! config error, 2 I/O or file-format error, 3 non-finite values.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hypogen", version, about = "Weakly supervised hypothesis generation for multi-choice QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config sources shared by the model subcommands.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic taxonomy: train/dev JSONL and the pretraining corpus.
    GenData {
        #[arg(long, default_value_t = 6)]
        categories: usize,
        #[arg(long, default_value_t = 600)]
        hyponyms: usize,
        /// Defaults to HYPOGEN_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.2)]
        dev_fraction: f64,
        /// Copies of each pretraining sentence.
        #[arg(long, default_value_t = 4)]
        repeats: usize,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the language model on the corpus.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus text file.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Dataset whose vocabulary the corpus uses.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Where to write the pretrained LM.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one mode from a pretrained LM.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        dev_data: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Where to write the training checkpoint (after every epoch).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a training checkpoint instead of the pretrained LM.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a training checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation dataset (defaults to dev_data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Accuracy with and without the hypothesis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dump generated hypotheses next to the gold and predicted answers.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hypogen::Error>() {
            return match e {
                hypogen::Error::Io { .. }
                | hypogen::Error::Parse { .. }
                | hypogen::Error::Schema { .. }
                | hypogen::Error::Vocab(_)
                | hypogen::Error::Format(_) => 2,
                hypogen::Error::Numeric(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData {
            categories,
            hyponyms,
            seed,
            dev_fraction,
            repeats,
            out,
        } => commands::gen_data(categories, hyponyms, seed, dev_fraction, repeats, &out),
        Command::Pretrain {
            cfg,
            corpus,
            train_data,
            out,
        } => commands::pretrain(&cfg, flags([("corpus", corpus), ("train_data", train_data), ("pretrained", out)])),
        Command::Train {
            cfg,
            mode,
            epochs,
            seed,
            train_data,
            dev_data,
            pretrained,
            out,
            resume,
        } => {
            let mut sets = flags([
                ("train_data", train_data),
                ("dev_data", dev_data),
                ("pretrained", pretrained),
                ("checkpoint", out),
            ]);
            sets.extend(mode.map(|m| format!("mode={m}")));
            sets.extend(epochs.map(|e| format!("epochs={e}")));
            sets.extend(seed.map(|s| format!("seed={s}")));
            commands::train(&cfg, sets, resume.as_deref(), epochs)
        }
        Command::Eval { cfg, checkpoint, data } => {
            commands::eval(&cfg, flags([("checkpoint", checkpoint), ("dev_data", data)]))
        }
        Command::Ablate { cfg, checkpoint, data } => {
            commands::ablate(&cfg, flags([("checkpoint", checkpoint), ("dev_data", data)]))
        }
        Command::Inspect {
            cfg,
            checkpoint,
            data,
            limit,
        } => commands::inspect(&cfg, flags([("checkpoint", checkpoint), ("dev_data", data)]), limit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Path flags turned into `key=value` overrides.
fn flags<const N: usize>(pairs: [(&str, Option<PathBuf>); N]) -> Vec<String> {
    pairs
        .into_iter()
        .filter_map(|(k, v)| v.map(|p| format!("{k}={}", p.display())))
        .collect()
}
