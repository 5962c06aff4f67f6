use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use mlx_core::config::ExperimentConfig;
use mlx_core::run::{run, Command};
use mlx_core::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sub {
    GenData,
    Train,
    Eval,
    BoundaryDump,
    GpVerify,
    Sweep,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::GenData => Command::GenData,
            Sub::Train => Command::Train,
            Sub::Eval => Command::Eval,
            Sub::BoundaryDump => Command::BoundaryDump,
            Sub::GpVerify => Command::GpVerify,
            Sub::Sweep => Command::Sweep,
        }
    }
}

/// Learning-from-explanations experiments: data generation, training,
/// evaluation, decision-boundary dumps and GP theory checks.
#[derive(Debug, Parser)]
#[command(name = "mlx", version)]
struct Cli {
    #[arg(value_enum)]
    subcommand: Sub,
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => match cli.seed {
            Some(s) => c.with_seed(s),
            None => c,
        },
        Err(e) => {
            eprintln!("mlx: {e}");
            return ExitCode::from(2);
        }
    };
    let quiet = cli.quiet;
    let result = run(cli.subcommand.into(), &cfg, cli.out.as_deref(), |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.4}  robust {:.4}  reg {:.4}  val avg {:.4}  val wg {:.4}",
                r.epoch, r.train_loss, r.robust_loss, r.reg_loss, r.val_avg_acc, r.val_wg_acc
            );
        }
    });
    match result {
        Ok(out) => {
            println!("{}", out.summary);
            for p in out.artifacts {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("mlx: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("mlx: {e}");
            ExitCode::FAILURE
        }
    }
}
