//! Collapses the aluminum shell and fiberglass jacket of the tank into one
//! convection coefficient at the soil surface and checks the steady radial
//! profile it produces.
//!
//! `cargo run --release --example effective_convection -- [ambient coefficient W/m2K]`

use rkthm::reduced_bc::{analytic_radial_t, effective_coeff, layer_resistance, CompositeLayerSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let c: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10.0);
    let spec = CompositeLayerSpec {
        r1: 0.2773,
        r2: 0.2805,
        r_o: 0.3305,
        k_al: 205.0,
        k_fg: 0.04,
        c,
        t_env: 22.0,
    };
    spec.validate()?;
    println!("{:>12} {:>14}", "jacket_mm", "c_eff_W/m2K");
    for mm in [5.0, 10.0, 25.0, 50.0, 100.0] {
        let s = CompositeLayerSpec { r_o: spec.r2 + mm * 1e-3, ..spec };
        println!("{mm:>12.0} {:>14.4}", effective_coeff(&s));
    }
    println!();
    let c_eff = effective_coeff(&spec);
    println!("layer resistance A = {:.5} m K/W", layer_resistance(&spec));
    println!("ambient c = {c} W/(m2 K)  ->  effective c = {c_eff:.4} W/(m2 K) at r = {} m", spec.r1);

    let profile = analytic_radial_t(0.00625, spec.r1, 200.0, 0.46, c_eff, spec.t_env)?;
    println!("\n{:>8} {:>10} {:>12}", "r_mm", "T_C", "q_W/m2");
    for r in [0.00625, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.2773] {
        println!("{:>8.2} {:>10.3} {:>12.3}", r * 1e3, profile.temperature(r), profile.flux(r));
    }
    Ok(())
}
