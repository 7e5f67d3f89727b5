//! `rkthm` command-line tool. Thread count comes from `RKTHM_THREADS`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rkthm::app::{self, RunOptions};

#[derive(Parser)]
#[command(version, about = "Meshfree thermo-hydraulic simulation of heated bentonite")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the command's primary random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Trained retention network (JSON).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Steady conduction against the closed-form radial profile.
    ValidateHeat,
    /// Axisymmetric linear patch test of the smoothed gradients.
    PatchTest,
    /// Fits Lu retention curves per temperature.
    FitSwrc,
    /// Trains the retention network.
    TrainDnn,
    /// Heating stage of the bentonite tank.
    SimulateTank,
    /// Per-temperature RMSE of fitted curves and the network.
    CompareSwrc,
}

fn run(cli: Cli) -> app::Result<()> {
    app::init_threads()?;
    let opts = RunOptions {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        model: cli.model,
    };
    match cli.command {
        Command::ValidateHeat => {
            let s = app::cmd_validate_heat(&opts)?;
            for r in &s.rows {
                println!("R/h {:>4}  enriched {:<5}  rel L2 {:.4e}", r.divisions, r.enriched, r.relative_l2);
            }
        }
        Command::PatchTest => {
            let r = app::cmd_patch_test(&opts)?;
            println!("axisymmetric max error {:.3e}", r.axisymmetric.max_error());
            println!("cartesian    max error {:.3e}", r.cartesian.max_error());
        }
        Command::FitSwrc => {
            let f = app::cmd_fit_swrc(&opts)?;
            println!("fitted {} curves", f.fits.len());
            for r in f.recovery.iter().flatten() {
                println!("T {:>6.1}  parameter error {:.2e}", r.temperature, r.max_relative_error);
            }
        }
        Command::TrainDnn => {
            let m = app::cmd_train_dnn(&opts)?;
            println!(
                "relative error train {:.3}%  test {:.3}%",
                100.0 * m.train_relative_error,
                100.0 * m.test_relative_error
            );
        }
        Command::SimulateTank => {
            let s = app::cmd_simulate_tank(&opts)?;
            println!("{} steps to t = {:.0} s in {:.1} s", s.steps, s.final_time_s, s.wall_time_s);
        }
        Command::CompareSwrc => {
            for r in app::cmd_compare_swrc(&opts)? {
                println!("T {:>6.1}  fit {:.3e}  dnn {:.3e}", r.temperature, r.rmse_fit_vs_data, r.rmse_dnn_vs_data);
            }
        }
    }
    println!("results in {}", opts.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
