use clap::{Parser, Subcommand};
use moe_ecology_cli::report::{cmd_report, EpochWindow};
use moe_ecology_cli::run::{cmd_eval, cmd_scan, cmd_train};
use moe_ecology_cli::sweep::cmd_sweep;
use moe_ecology_cli::{apply_output_root, open_checkpoint, resolve_config, CliError, OUT_ENV};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "moe-ecology",
    version,
    about = "Train top-2 MoE models and measure expert ecology"
)]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set loss.b=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; takes precedence over MOE_ECOLOGY_OUT and experiment.output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train {
        /// Continue from a checkpoint; the run's config is read from it.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print its ecology report.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Evaluate a frozen checkpoint across temperatures.
    Scan {
        checkpoint: PathBuf,
        /// Comma-separated temperatures; defaults to scan.temps.
        #[arg(long, value_delimiter = ',')]
        temps: Option<Vec<f64>>,
        /// CSV destination; defaults to scan.csv beside the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// One run per value of a config key.
    Sweep {
        /// `key=v1,v2,...`
        #[arg(long)]
        axis: String,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize one or more finished runs.
    Report {
        /// Run directories or metrics.jsonl files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Stability window `lo:hi` (inclusive epochs).
        #[arg(long)]
        window: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let env_out = std::env::var(OUT_ENV).ok();
    let resolve = || {
        resolve_config(
            cli.config.as_deref(),
            &cli.sets,
            cli.seed,
            cli.out.as_deref(),
            env_out.as_deref(),
        )
    };
    if cli.print_config {
        print!("{}", resolve()?.to_toml());
        return Ok(());
    }
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        None => Err(CliError::Usage(
            "no command given; try `moe-ecology --help`".into(),
        )),
        Some(Command::Train { resume: None }) => {
            let outcome = cmd_train(&resolve()?, None, &mut stdout)?;
            println!("wrote {}", outcome.run_dir.display());
            Ok(())
        }
        Some(Command::Train { resume: Some(path) }) => {
            if cli.config.is_some() || !cli.sets.is_empty() || cli.seed.is_some() {
                return Err(CliError::Usage(
                    "--resume takes its config from the checkpoint; drop --config/--set/--seed"
                        .into(),
                ));
            }
            let (ckpt, mut cfg) = open_checkpoint(&path)?;
            apply_output_root(&mut cfg, cli.out.as_deref(), env_out.as_deref());
            let outcome = cmd_train(&cfg, Some(ckpt.trainer), &mut stdout)?;
            println!("wrote {}", outcome.run_dir.display());
            Ok(())
        }
        Some(Command::Eval {
            checkpoint,
            temperature,
            json,
        }) => cmd_eval(&checkpoint, temperature, json.as_deref(), &mut stdout).map(drop),
        Some(Command::Scan {
            checkpoint,
            temps,
            csv,
        }) => cmd_scan(&checkpoint, temps.as_deref(), csv.as_deref(), &mut stdout).map(drop),
        Some(Command::Sweep { axis, jobs }) => {
            cmd_sweep(&resolve()?, &axis, jobs, &mut stdout).map(drop)
        }
        Some(Command::Report { runs, window }) => {
            let window = window.as_deref().map(EpochWindow::parse).transpose()?;
            cmd_report(&runs, window, &mut stdout)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
