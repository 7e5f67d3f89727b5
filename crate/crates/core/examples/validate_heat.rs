//! Steady radial conduction from a 200 °C heater against the closed-form
//! profile, with and without the log enrichment.
//!
//! `cargo run --release --example validate_heat`

use rkthm::solver::HeatValidation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:>6} {:>9} {:>7} {:>12} {:>12}", "R/h", "enriched", "nodes", "rel L2", "max |err|");
    for enriched in [true, false] {
        for divisions in [100, 200, 400, 800] {
            let rep = HeatValidation {
                divisions,
                enriched,
                ..Default::default()
            }
            .run()?;
            println!(
                "{divisions:>6} {enriched:>9} {:>7} {:>12.4e} {:>12.4e}",
                rep.nodes, rep.relative_l2, rep.max_abs_error
            );
        }
    }
    Ok(())
}
