//! `vadam` command-line runner.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 numerical
//! failure or a failed check.

mod checks;
mod compare;
mod config;
mod datasets;
mod fit;
mod varopt;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{CliResult, RawConfig};

#[derive(Debug, Parser)]
#[command(name = "vadam", version, about = "Variational Adam and natural-gradient VI experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the config-driven commands.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file; every key has a default.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set optimizer.alpha=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory; beats VADAM_OUTPUT_DIR and `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model with one optimizer; writes trace.csv and posterior.json.
    Fit(RunArgs),
    /// Sweep optimizers, minibatch sizes and seeds against the exact
    /// mean-field posterior of a GLM; writes comparison.csv.
    CompareLogreg(RunArgs),
    /// Enumerate all minibatches and check the expected squared-gradient identity.
    Theorem1(checks::Theorem1Args),
    /// Compare model gradients with central differences.
    Gradcheck(checks::GradcheckArgs),
    /// Variational optimization of a black-box objective from several starts.
    Varopt(RunArgs),
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut stdout = std::io::stdout().lock();
    let load = |a: &RunArgs| RawConfig::load(a.config.as_deref(), &a.sets);
    match cli.command {
        Command::Fit(a) => report(fit::run(&load(&a)?, a.out.as_deref())?),
        Command::CompareLogreg(a) => report(compare::run(&load(&a)?, a.out.as_deref())?),
        Command::Varopt(a) => report(varopt::run(&load(&a)?, a.out.as_deref())?),
        Command::Theorem1(a) => checks::theorem1(&a, &mut stdout),
        Command::Gradcheck(a) => checks::gradcheck(&a, &mut stdout),
    }
}

fn report(dir: PathBuf) -> CliResult<()> {
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
