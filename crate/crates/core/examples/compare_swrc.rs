//! Per-temperature RMSE of the fitted Lu curves and a trained network against
//! the retention data, in the layout of a comparison table.
//!
//! `cargo run --release --example compare_swrc -- [model.json]`
//!
//! Without a model file a network is trained briefly first.

use rkthm::app::compare_curves;
use rkthm::swrc_dnn::{build_reproduction, train, MlpModel, ReproductionSpec, TrainParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ReproductionSpec::default();
    let rep = build_reproduction(&spec)?;
    let model = match std::env::args().nth(1) {
        Some(path) => MlpModel::load(path)?,
        None => {
            println!("no model given, training for 3000 epochs");
            train(&rep.dataset, &TrainParams { epochs: 3000, ..Default::default() })?.model
        }
    };
    let rows = compare_curves(&model, &rep.fit_params(), &rep.measurements, Some(&spec.family), &spec.grid)?;
    println!("{:>6} {:>14} {:>14} {:>14}", "T_C", "fitted Lu", "DNN", "DNN vs curve");
    for r in rows {
        println!(
            "{:>6.1} {:>14.3e} {:>14.3e} {:>14.3e}",
            r.temperature, r.rmse_fit_vs_data, r.rmse_dnn_vs_data, r.rmse_dnn_vs_fit
        );
    }
    Ok(())
}
