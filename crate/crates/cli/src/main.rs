use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fixformer_cli::commands::{self, CHECKPOINT_FILE};
use fixformer_cli::config::RunConfig;
use fixformer_cli::{exit_code, init_threads, EXIT_NUMERICAL, EXIT_USAGE};
use fixformer_core::synthetic::Split;
use fixformer_core::Result;

#[derive(Parser)]
#[command(name = "fixformer", version, about = "Gaze-token fusion transformer")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PGM images, raw gaze CSVs, manifest) to paths.data_dir.
    Generate,
    /// Train with early stopping; writes checkpoint and report into paths.out_dir.
    Train,
    /// Score a checkpoint on one split.
    Eval {
        /// Defaults to <paths.out_dir>/checkpoint.fxck.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic gradients with central finite differences per parameter group.
    Gradcheck,
    /// Ragged versus padded cross-attention: buffer sizes and timings.
    Bench,
    /// Dump image→gaze attention weights of one sample, one file per (layer, head).
    ExportAttn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: String,
    },
    /// Summarize a report file or a directory of attention dumps.
    Report { path: PathBuf },
    /// Print the fully resolved configuration as TOML.
    Config,
}

fn run(cli: Cli) -> Result<i32> {
    init_threads()?;
    if let Command::Report { path } = &cli.command {
        print!("{}", commands::cmd_report(path)?);
        return Ok(0);
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let default_ck = || cfg.out_dir.join(CHECKPOINT_FILE);
    match cli.command {
        Command::Generate => {
            let manifest = commands::cmd_generate(&cfg)?;
            println!("wrote {} samples, manifest {}", cfg.data.len(), manifest.display());
        }
        Command::Train => {
            let run = commands::cmd_train(&cfg)?;
            print!("{}", run.summary());
        }
        Command::Eval { checkpoint, split } => {
            let split: Split = split.parse()?;
            let ck = checkpoint.unwrap_or_else(default_ck);
            let (m, _) = commands::cmd_eval(&cfg, &ck, split)?;
            print!("{}", commands::metrics_summary(split.as_str(), &m));
        }
        Command::Gradcheck => {
            let run = commands::cmd_gradcheck(&cfg)?;
            print!("{}", run.table());
            if !run.all_passed() {
                return Ok(EXIT_NUMERICAL);
            }
        }
        Command::Bench => {
            let rows = commands::cmd_bench(&cfg)?;
            print!("{}", commands::bench_table(&rows));
        }
        Command::ExportAttn { checkpoint, sample } => {
            let ck = checkpoint.unwrap_or_else(default_ck);
            let paths = commands::cmd_export_attention(&cfg, &ck, &sample)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
