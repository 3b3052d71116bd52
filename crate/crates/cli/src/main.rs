use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swimlane_cli::commands::{self, Overrides};
use swimlane_cli::plot::PlotKind;
use swimlane_cli::CliError;
use swimlane_core::placement::{Ratio, Strategy};
use swimlane_core::RunMode;
use tracing_subscriber::filter::LevelFilter;

#[derive(Parser)]
#[command(
    name = "swimlane",
    version,
    about = "Asynchronous rollout/training pipeline experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the live runtime and append metrics as JSON lines.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<RunMode>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        ratio: Option<Ratio>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "metrics.jsonl")]
        out: PathBuf,
    },
    /// Run the discrete-event model, optionally over a sweep of env counts.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<RunMode>,
        /// `envs=A..B:step`
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run sync and async on the same config and report the speedup.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Render a metrics file, compare report or sweep CSV as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: PlotKind,
    },
    /// Pool churn workload against dual pools and the unified baseline.
    Membench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging() {
    let level = match std::env::var("DVLA_LOG").as_deref() {
        Ok("quiet") => LevelFilter::OFF,
        Ok("trace") => LevelFilter::TRACE,
        _ => LevelFilter::INFO,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Invalid(e.to_string()))
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train {
            config,
            mode,
            strategy,
            ratio,
            seed,
            out,
        } => {
            let mut cfg = commands::load_config(config.as_deref())?;
            Overrides {
                mode,
                strategy,
                ratio,
                seed,
            }
            .apply(&mut cfg)?;
            let s = commands::train(&cfg, &out)?;
            print!("{}", to_json(&s)?);
        }
        Cmd::Simulate {
            config,
            mode,
            sweep,
            out,
        } => {
            let mut cfg = commands::load_config(config.as_deref())?;
            Overrides {
                mode,
                ..Overrides::default()
            }
            .apply(&mut cfg)?;
            let results = commands::simulate_cmd(&cfg, sweep.as_deref())?;
            match out {
                Some(path) => commands::write_text(&path, &commands::curve_text(&results))?,
                None if results.len() == 1 => print!("{}", to_json(&results[0])?),
                None => print!("{}", commands::curve_text(&results)),
            }
        }
        Cmd::Compare { config, out } => {
            let cfg = commands::load_config(config.as_deref())?;
            let r = commands::compare(&cfg, &out)?;
            println!(
                "speedup {:.3} (model {:.3}), bottleneck {}, quasi-synchronous {}",
                r.speedup, r.sim_speedup, r.bottleneck, r.quasi_synchronous
            );
        }
        Cmd::Plot { input, out, kind } => {
            let svg = commands::plot(&input, kind)?;
            commands::write_text(&out, &svg)?;
        }
        Cmd::Membench { config, out } => {
            let cfg = commands::load_config(config.as_deref())?;
            let text = to_json(&commands::membench(&cfg)?)?;
            match out {
                Some(path) => commands::write_text(&path, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors; --help and --version are not
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
