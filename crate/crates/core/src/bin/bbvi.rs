use std::path::PathBuf;
use std::process::ExitCode;

use bbvi::experiments::{execute, write_results, ExperimentConfig, ExperimentKind};
use bbvi::Error;
use clap::{Args, Parser, Subcommand};

/// Stepsize sweeps, scaling studies and diagnostics for black-box
/// variational inference with structured location-scale families.
#[derive(Parser)]
#[command(name = "bbvi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Hit time of every (family, n, stepsize) cell -> sweep.csv
    Sweep,
    /// Best-stepsize hit time per (family, n) -> scaling.csv
    Scaling,
    /// Empirical gradient variance against its bound -> variance.csv
    Variance,
    /// Hessian determinant and smallest eigenvalue on an (x, y) grid -> nonconvex.csv
    Nonconvex,
    /// One traced optimization run per (family, n) -> trace_<family>_n<n>.csv
    Run,
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Overrides {
    /// `key = value` file with dotted keys and `#` comments
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Comma-separated families: mean_field, full_rank, structured
    #[arg(long, global = true, value_name = "LIST")]
    family: Option<String>,
    /// Comma-separated local block counts
    #[arg(long, global = true, value_name = "LIST")]
    n: Option<String>,
    /// Accuracy threshold on the averaged squared distance
    #[arg(long, global = true, value_name = "F")]
    eps: Option<String>,
    /// Monte Carlo samples per gradient estimate
    #[arg(long, global = true, value_name = "INT")]
    m: Option<String>,
    /// Iteration cap per cell
    #[arg(long, global = true, value_name = "INT")]
    tmax: Option<String>,
    /// Replications averaged per cell
    #[arg(long, global = true, value_name = "INT")]
    reps: Option<String>,
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<String>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
}

fn kind(c: &Command) -> ExperimentKind {
    match c {
        Command::Sweep => ExperimentKind::Sweep,
        Command::Scaling => ExperimentKind::Scaling,
        Command::Variance => ExperimentKind::Variance,
        Command::Nonconvex => ExperimentKind::Nonconvex,
        Command::Run => ExperimentKind::Run,
    }
}

fn load(cli: &Cli) -> bbvi::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(kind(&cli.command));
    if let Some(path) = &cli.opts.config {
        cfg.apply_file(path)?;
    }
    cfg.kind = kind(&cli.command);
    let o = &cli.opts;
    let flags = [
        ("family", &o.family),
        ("target.n", &o.n),
        ("eps", &o.eps),
        ("samples", &o.m),
        ("tmax", &o.tmax),
        ("reps", &o.reps),
        ("seed", &o.seed),
        ("out", &o.out),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load(&cli).and_then(|cfg| {
        let results = execute(&cfg)?;
        write_results(&results, &cfg.out)
    });
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bbvi: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
