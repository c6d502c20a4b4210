//! `samkit` command line: train | align | ablate | distsim.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use samkit_core::harness::{self, FlatConfig};
use samkit_core::Error;

#[derive(Parser)]
#[command(
    name = "samkit",
    about = "Sharpness-aware minimization laboratory: SAM, K-SAM and top-k SGD with alignment and cost diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured optimizer and write metrics, a checkpoint
    /// and a JSON summary.
    Train(RunArgs),
    /// Train while recording gradient-alignment probes at the probe cadence.
    Align(RunArgs),
    /// Run the K1 x K2 x selection ablation grid and summarize accuracy,
    /// cost and wall-clock per cell.
    Ablate(RunArgs),
    /// Simulated data-parallel K-SAM with per-worker perturbations.
    Distsim(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Additional key=value overrides, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved config and exit without running.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn load(&self) -> Result<FlatConfig, Error> {
        let mut config = FlatConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            config.set("run.seed", &seed.to_string())?;
        }
        if let Some(out) = &self.out {
            config.set("run.out", &out.to_string_lossy())?;
        }
        config.apply_overrides(&self.overrides)?;
        Ok(config)
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let args = match &cli.command {
        Command::Train(a) | Command::Align(a) | Command::Ablate(a) | Command::Distsim(a) => a,
    };
    let config = args.load()?;
    if args.print_config {
        print!("{}", config.render());
        return Ok(());
    }
    let setup = harness::resolve(config)?;
    match cli.command {
        Command::Train(_) => {
            let summary = harness::cmd_train(&setup)?;
            report_summary(&summary);
        }
        Command::Align(_) => {
            let summary = harness::cmd_align(&setup)?;
            report_summary(&summary);
        }
        Command::Ablate(_) => {
            let rows = harness::cmd_ablate(&setup)?;
            println!(
                "{:<14} {:>5} {:>5} {:>7} {:>9} {:>9} {:>11} {:>8} {:>8}",
                "method", "k1", "k2", "sel", "acc", "stderr", "cost/step", "vs sgd", "wall s"
            );
            for r in &rows {
                println!(
                    "{:<14} {:>5} {:>5} {:>7} {:>9.4} {:>9.4} {:>11.1} {:>8.3} {:>8.2}",
                    r.label,
                    r.k1,
                    r.k2,
                    match r.selection {
                        samkit_core::optim::Selection::TopK => "topk",
                        samkit_core::optim::Selection::Random => "random",
                    },
                    r.acc_mean,
                    r.acc_stderr,
                    r.cost_units_per_step,
                    r.cost_ratio_vs_sgd,
                    r.wall_s_mean
                );
            }
        }
        Command::Distsim(_) => {
            let summary = harness::cmd_distsim(&setup)?;
            report_summary(&summary);
        }
    }
    Ok(())
}

fn report_summary(summary: &harness::RunSummary) {
    match summary.final_test_accuracy {
        Some(acc) => println!(
            "run {} ({}) finished: test accuracy {:.4}, {:.2}s, {:.0} cost units",
            summary.run_id,
            summary.method,
            acc,
            summary.total_wall_clock_ns as f64 / 1e9,
            summary.total_cost_units
        ),
        None => println!(
            "run {} ({}) finished: {:.2}s, {:.0} cost units",
            summary.run_id,
            summary.method,
            summary.total_wall_clock_ns as f64 / 1e9,
            summary.total_cost_units
        ),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
