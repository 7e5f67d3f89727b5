//! Fits Lu retention curves to retention data, one curve per temperature.
//!
//! `cargo run --release --example fit_swrc -- [data.csv]`
//!
//! The CSV needs `T_C`, `psi_MPa` and `S` columns. Without one, points are
//! sampled from the built-in synthetic family and the recovered parameters
//! are compared with the generating ones.

use rkthm::constitutive::{fit_lu, read_retention_csv, FitOptions, SyntheticRetention};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let family = SyntheticRetention::default();
    let (points, synthetic) = match std::env::args().nth(1) {
        Some(path) => (read_retention_csv(path)?, false),
        None => {
            let temps = [24.0, 40.0, 60.0, 80.0, 100.0, 120.0];
            let levels = [0.26, 0.34, 0.42, 0.50, 0.58, 0.66, 0.74];
            (family.measurements(&temps, &levels)?, true)
        }
    };
    let mut temps: Vec<f64> = points.iter().map(|p| p.temperature).collect();
    temps.sort_by(f64::total_cmp);
    temps.dedup();

    println!(
        "{:>6} {:>8} {:>9} {:>8} {:>7} {:>6} {:>6} {:>10}",
        "T_C", "th_amax", "psi_max", "psi_c", "alpha", "n", "m", "residual"
    );
    for t in temps {
        let samples: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.temperature == t)
            .map(|p| (p.psi, p.saturation))
            .collect();
        let fit = fit_lu(&samples, family.theta_s, &FitOptions::default())?;
        let p = fit.params;
        print!(
            "{t:>6.1} {:>8.4} {:>9.2} {:>8.3} {:>7.3} {:>6.3} {:>6.3} {:>10.2e}",
            p.theta_a_max,
            p.psi_max,
            p.psi_c,
            p.alpha,
            p.n,
            p.m(),
            fit.residual_norm
        );
        if synthetic {
            let truth = family.params_at(t);
            let err = (p.psi_c - truth.psi_c).abs() / truth.psi_c;
            print!("   psi_c error {err:.1e}");
        }
        println!();
    }
    Ok(())
}
