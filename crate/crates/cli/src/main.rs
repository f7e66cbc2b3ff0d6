use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use seqcl_cli::data::{make_data, DataKind};
use seqcl_cli::report::{report, verify};
use seqcl_cli::{config, run, CliError};

#[derive(Parser)]
#[command(name = "seqcl", version, about = "Continual learning experiments on sequential data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment plan from a config file, or resume one.
    Run {
        /// TOML run configuration.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Dotted-key override, e.g. `strategy.lambda=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Journal of an interrupted run to continue.
        #[arg(long, conflicts_with_all = ["config", "overrides"])]
        resume: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write a synthetic dataset and its manifest.
    MakeData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
    },
    /// Aggregate the records of several run directories.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Check the artifacts of run directories.
    Verify {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Kind {
    Strokes,
    Featureseq,
}

fn run_command(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            config: cfg_path,
            overrides,
            resume,
            jobs,
        } => {
            let dir = match (resume, cfg_path) {
                (Some(journal), _) => run::resume(&journal, jobs)?,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))?;
                    let cwd = std::env::current_dir().unwrap_or_default();
                    let cfg = config::load(&text, &overrides, &cwd)?;
                    run::start(&cfg, jobs)?
                }
                (None, None) => return Err(CliError::Config("run: --config or --resume is required".into())),
            };
            println!("{}", dir.display());
        }
        Command::MakeData {
            kind,
            out,
            seed,
            classes,
            per_class,
        } => {
            let kind = match kind {
                Kind::Strokes => DataKind::Strokes,
                Kind::Featureseq => DataKind::Featureseq,
            };
            let m = make_data(kind, &out, seed, classes, per_class)?;
            println!("{}: {} sequences", out.display(), m.sequences);
        }
        Command::Report { out, run_dirs } => {
            for p in report(&run_dirs, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Verify { run_dirs } => {
            let mut failed = 0;
            for dir in &run_dirs {
                failed += print_checks(dir);
            }
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} checks failed")));
            }
        }
    }
    Ok(())
}

fn print_checks(dir: &Path) -> usize {
    let checks = verify(dir);
    for c in &checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        println!("{status} {} {}: {}", dir.display(), c.name, c.detail);
    }
    checks.iter().filter(|c| !c.passed).count()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
