use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use opfree::error::{Error, Result};
use opfree::io::{error_json, load_problem, parse_grid, run, Command, Output, RunArgs};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Moments,
    Cumulants,
    ConvolvePower,
    NfoldSum,
    Subordinate,
    Density,
    Verify,
    VerifySection5,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Moments => Command::Moments,
            Cmd::Cumulants => Command::Cumulants,
            Cmd::ConvolvePower => Command::ConvolvePower,
            Cmd::NfoldSum => Command::NfoldSum,
            Cmd::Subordinate => Command::Subordinate,
            Cmd::Density => Command::Density,
            Cmd::Verify => Command::Verify,
            Cmd::VerifySection5 => Command::VerifySection5,
        }
    }
}

/// Operator-valued free probability over M_d(C).
#[derive(Debug, Parser)]
#[command(name = "opfree", version)]
struct Cli {
    /// Command to run.
    #[arg(value_enum)]
    command: Cmd,
    /// Problem spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximal moment degree.
    #[arg(long)]
    degree: Option<usize>,
    /// Free-product truncation depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Evaluation point(s): a d x d (or nd x nd) matrix in JSON, or an array of them.
    #[arg(long)]
    z: Option<String>,
    /// Density grid `a,b,steps`.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    /// Imaginary offset for densities.
    #[arg(long)]
    eps: Option<f64>,
    /// Random seed for verification sampling.
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(cli: &Cli) -> Result<Output> {
    let spec = load_problem(&cli.spec)?;
    let args = RunArgs {
        degree: cli.degree,
        depth: cli.depth,
        z: cli.z.clone(),
        grid: cli.grid.as_deref().map(parse_grid).transpose()?,
        eps: cli.eps,
        seed: cli.seed,
    };
    let out = run(cli.command.into(), &spec, &args)?;
    match &cli.out {
        Some(path) => std::fs::write(path, out.text()).map_err(Error::from)?,
        None => print!("{}", out.text()),
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => ExitCode::from(out.exit_code() as u8),
        Err(e) => {
            eprintln!("{}", serde_json::to_string_pretty(&error_json(&e)).expect("error JSON"));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
