//! Batch front end: run estimators against a model and prompt set, generate
//! toy model checkpoints, and generate bundled prompt distributions.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchlab_core::error::{Error, Result};
use patchlab_core::model::{generate_weights, save_model};
use patchlab_core::prompts::Vocab;
use patchlab_core::ModelConfig;

#[derive(Parser)]
#[command(name = "patchlab", version, about)]
struct Cli {
    /// Size of the worker thread pool (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the estimators described by a JSON config and write artifacts.
    Run {
        config: PathBuf,
        /// Validate the config and print planned pass counts without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// Generate a random model checkpoint (manifest + weights).
    GenModel {
        /// RNG seed for weight initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path to a JSON file with the model dimensions.
        #[arg(long)]
        config: PathBuf,
        /// Output manifest path; weights.bin is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a bundled prompt distribution as prompt-pair JSON.
    GenPrompts {
        /// One of: ioi, a-an, city-pp, ioi-pp, rand-pp, vocab.
        generator: String,
        /// Output path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the random generator.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Prompt length for the random generator.
        #[arg(long, default_value_t = 12)]
        len: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("{{\"error\":\"thread pool already initialized\"}}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = runner::exit_code(&err);
            let payload = serde_json::json!({ "error": err.to_string(), "exit_code": code });
            eprintln!("{payload}");
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run { config, dry_run } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg: config::RunConfig = serde_json::from_str(&text)?;
            runner::run(&cfg, dry_run)
        }
        Cmd::GenModel { seed, config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let model_cfg: ModelConfig = serde_json::from_str(&text)?;
            model_cfg.validate()?;
            let weights = generate_weights(&model_cfg, seed)?;
            save_model(&out, &model_cfg, &weights)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::GenPrompts { generator, out, seed, len } => {
            let text = if generator == "vocab" {
                serde_json::to_string_pretty(Vocab::builtin().words())
                    .map_err(Error::from)?
            } else {
                config::generate(&generator, seed, len)?.to_json()?
            };
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}
