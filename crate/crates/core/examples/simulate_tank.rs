//! Heating stage of the bentonite tank: 200 °C heater, effective convection on
//! the outer walls, DNN retention with the high-temperature correction.
//!
//! `cargo run --release --example simulate_tank -- model.json|- [config.json|-] [out_dir]`
//!
//! Without a model file the built-in synthetic retention family is used.

use std::sync::Arc;
use std::time::Instant;

use rkthm::constitutive::{SaturationModel, SyntheticRetention};
use rkthm::solver::{run_heating_stage_with, write_sensor_csv, CoupledProblem, SimConfig};
use rkthm::swrc_dnn::MlpModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model: Arc<dyn SaturationModel> = match args.first().filter(|a| *a != "-") {
        Some(path) => Arc::new(MlpModel::load(path)?),
        None => Arc::new(SyntheticRetention::default()),
    };
    let config: SimConfig = match args.get(1).filter(|a| *a != "-") {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => SimConfig::default(),
    };
    let problem = CoupledProblem::new(config, model)?;
    println!("{} nodes, {} unknowns, {} Jacobian entries", problem.disc.node_count(), problem.len(), problem.nnz());

    let started = Instant::now();
    let mut last_hour = 0.0;
    let run = run_heating_stage_with(&problem, |state, report| {
        let hour = state.time / 3600.0;
        if hour - last_hour >= 25.0 - 1e-9 {
            last_hour = hour;
            println!(
                "t = {hour:6.1} h  dt = {:7.1} s  newton {}  rejected {}  ({:.1} s)",
                report.dt,
                report.newton.iterations,
                report.rejections,
                started.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("finished {} steps in {:.1} s", run.steps.len(), started.elapsed().as_secs_f64());

    let sensors = problem.config.sensor_points().len();
    println!("{:>7} {}", "t_h", (0..sensors).map(|i| format!("{:>22}", format!("sensor {i} (T, S)"))).collect::<String>());
    let every = 50.0 * 3600.0;
    for k in 0..=((problem.config.time.t_end / every).round() as usize) {
        let t = k as f64 * every;
        let row: Vec<_> = run.sensors.iter().filter(|r| (r.time_s - t).abs() < 1.0).collect();
        if row.is_empty() {
            continue;
        }
        print!("{:>7.0}", t / 3600.0);
        for r in row {
            print!("{:>13.2} {:>8.4}", r.t_c, r.s);
        }
        println!();
    }
    if let Some(dir) = args.get(2) {
        std::fs::create_dir_all(dir)?;
        let path = std::path::Path::new(dir).join("sensors.csv");
        write_sensor_csv(&path, &run.sensors)?;
        println!("sensor history written to {}", path.display());
    }
    Ok(())
}
