use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seot_cli::{cmd_baseline, cmd_run, cmd_run2, cmd_spectrum, cmd_synth, CliResult, KArg, Overrides, RunArgs};

/// Domain adaptation by spectral embedding of optimal transport plans.
///
/// Exit codes: 0 on success, 2 for input or usage errors, 3 for numerical
/// failures.
#[derive(Parser)]
#[command(name = "seot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shifted benchmark: source_<i>.csv, target.csv, manifest.json.
    Synth {
        /// key = value synth config (n_classes, samples_per_class, d, class_separation, n_sources, shift, seed).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt from one or more labeled sources to the target through a barycenter.
    Run(Common),
    /// Adapt from exactly one source.
    Run2 {
        #[command(flatten)]
        common: Common,
        /// Use the direct source-target plan instead of a one-source barycenter.
        #[arg(long)]
        direct: bool,
    },
    /// Write the smallest k_max + 1 eigenvalues and the eigengap table.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k_max: usize,
    },
    /// Train on the pooled sources only and evaluate on the labeled target.
    Baseline(Common),
}

#[derive(Args)]
struct Common {
    /// Labeled source dataset; repeat for several sources.
    #[arg(long = "source", required = true)]
    sources: Vec<PathBuf>,
    #[arg(long)]
    target: PathBuf,
    /// key = value run config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report (or spectrum) file. Sidecars are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension, or `auto` for the eigengap choice.
    #[arg(long)]
    k: Option<KArg>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Also export the cross-domain graph as an edge list.
    #[arg(long)]
    edges: Option<PathBuf>,
}

impl From<Common> for RunArgs {
    fn from(c: Common) -> Self {
        RunArgs {
            sources: c.sources,
            target: c.target,
            config: c.config,
            out: c.out,
            overrides: Overrides { seed: c.seed, k: c.k, epsilon: c.epsilon },
            edges: c.edges,
        }
    }
}

fn print_accuracy(report: &seot_cli::Report) {
    match report.accuracy {
        Some(a) => println!("{}: accuracy {a:.4} on {} target samples", report.method, report.n_target),
        None => println!("{}: {} target samples labeled", report.method, report.n_target),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let spec = cmd_synth(config.as_deref(), seed, &out)?;
            println!("wrote {} sources and a target to {} (seed {})", spec.n_sources, out.display(), spec.seed);
        }
        Command::Run(c) => print_accuracy(&cmd_run(&c.into())?),
        Command::Run2 { common, direct } => print_accuracy(&cmd_run2(&common.into(), direct)?),
        Command::Spectrum { common, k_max } => {
            let s = cmd_spectrum(&common.into(), k_max)?;
            println!("selected k = {}", s.selected_k);
        }
        Command::Baseline(c) => print_accuracy(&cmd_baseline(&c.into())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let seot_cli::CliError::Core(core) = &e {
                if let seot_core::SeotError::Stage { completed, .. } = core {
                    if !completed.is_empty() {
                        eprintln!("completed stages: {}", completed.join(", "));
                    }
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
