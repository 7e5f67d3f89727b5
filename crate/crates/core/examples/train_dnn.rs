//! Builds the synthetic retention dataset, trains the 2-100-100-1 network and
//! reports its accuracy against the fitted curves.
//!
//! `cargo run --release --example train_dnn [epochs] [model.json]`

use std::time::Instant;

use rkthm::constitutive::lu_swrc;
use rkthm::swrc_dnn::{build_reproduction, curve_rmse, train, ReproductionSpec, TrainParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20_000);
    let spec = ReproductionSpec::default();
    let rep = build_reproduction(&spec)?;
    let r = rep.dataset.ranges();
    println!(
        "dataset: {} points, T in [{:.2}, {:.2}] C, psi in [{:.3}, {:.2}] MPa, S in [{:.3}, {:.3}]",
        rep.dataset.len(),
        r[0][0],
        r[0][1],
        r[1][0],
        r[1][1],
        r[2][0],
        r[2][1]
    );

    let started = Instant::now();
    let out = train(&rep.dataset, &TrainParams { epochs, ..Default::default() })?;
    let last = out.history.last().unwrap();
    println!(
        "trained {} epochs in {:.1} s (best epoch {}), final loss train {:.4e} test {:.4e}",
        out.history.len(),
        started.elapsed().as_secs_f64(),
        out.best_epoch,
        last.train,
        last.test
    );
    println!(
        "relative error: train {:.4}%, test {:.4}%",
        100.0 * out.train_relative_error,
        100.0 * out.test_relative_error
    );

    println!("{:>6} {:>12} {:>12}", "T_C", "rmse_fit", "rmse_truth");
    for (t, fit) in &rep.fits {
        let vs_fit = curve_rmse(&out.model, &fit.params, *t, &spec.grid)?;
        let truth = spec.family.params_at(*t);
        let vs_truth = curve_rmse(&out.model, &truth, *t, &spec.grid)?;
        println!("{t:>6.1} {vs_fit:>12.3e} {vs_truth:>12.3e}");
    }
    let t = 65.0;
    let psi = 10.0;
    let (s, ds_dpsi, ds_dt) = out.model.saturation_and_derivs(t, psi);
    let truth = lu_swrc(psi, &spec.family.params_at(t))?;
    println!("S({t}, {psi}) = {s:.4} (reference {truth:.4}), dS/dpsi = {ds_dpsi:.4e}, dS/dT = {ds_dt:.4e}");
    if let Some(path) = std::env::args().nth(2) {
        out.model.save(&path)?;
        println!("model written to {path}");
    }
    Ok(())
}
