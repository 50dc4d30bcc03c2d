//! `dmlm`: report generation, dataset synthesis, pretraining, evaluation and
//! oracle self-tests.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 input error, 3 numerical
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dmlm", version, about = "Distribution-based masked image-language modeling toolkit")]
struct Cli {
    /// Overrides the seed from the config; recorded in the manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one structured report.
    Reportgen {
        #[arg(long)]
        disease: String,
        /// Finding phrase; repeat for several.
        #[arg(long = "findings", num_args = 0..)]
        findings: Vec<String>,
        #[arg(long, default_value = "template")]
        backend: String,
        #[arg(long)]
        out: PathBuf,
        /// Print the two rendered prompts.
        #[arg(long)]
        verbose: bool,
    },
    /// Synthesize a paired image/report dataset.
    Datagen {
        /// TOML spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the dual encoder on a generated dataset.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot evaluation of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrain-style TOML whose `[eval]` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the closed-form and gradient oracle suites.
    Selftest {
        #[arg(long, hide = true, value_enum)]
        mutate: Option<Mutation>,
    },
    /// Repeat a recorded run from its manifest into a new directory.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    KlSign,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Reportgen {
            disease,
            findings,
            backend,
            out,
            verbose,
        } => commands::reportgen(&disease, &findings, &backend, &out, verbose, seed),
        Command::Datagen { spec, out } => commands::datagen(spec.as_deref(), &out, seed),
        Command::Pretrain { config, data, out } => commands::pretrain(config.as_deref(), &data, &out, seed),
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
        } => commands::eval(&checkpoint, &data, &out, config.as_deref(), seed),
        Command::Selftest { mutate } => commands::selftest(mutate, seed),
        Command::Rerun { manifest, out } => commands::rerun(&manifest, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
