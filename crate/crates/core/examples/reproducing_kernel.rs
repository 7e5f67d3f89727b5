//! Reproducing-kernel shape functions on the graded tank grid: partition of
//! unity, linear and log reproduction at random points, and a look at one
//! enriched shape function near the heater.
//!
//! `cargo run --release --example reproducing_kernel`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rkthm::rk::{shape_functions, verify_reproduction, BasisSpec};
use rkthm::scni::build_rect_partition;
use rkthm::solver::SimConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SimConfig::default();
    let g = cfg.geometry;
    let partition = build_rect_partition(
        [g.r_i, g.r_o],
        [0.0, g.height],
        cfg.grid.nr,
        cfg.grid.nz,
        Some(cfg.grid.grading),
    )?;
    let cloud = partition.cloud(cfg.grid.support_factor)?;
    println!("{} nodes on {} x {} graded grid", cloud.len(), cfg.grid.nr, cfg.grid.nz);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, spec) in [("linear", BasisSpec::LINEAR), ("linear + log", BasisSpec::ENRICHED)] {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let p = [rng.random_range(g.r_i..g.r_o), rng.random_range(0.0..g.height)];
            worst = worst.max(verify_reproduction(p, &cloud, spec)?);
        }
        println!("{name:>13}: worst reproduction residual over 100 points {worst:.2e}");
    }

    let z = 0.5 * g.height;
    let node = partition.node_id(1, cfg.grid.nz / 2);
    println!("\nshape function of node {node} at r = {:.4} m:", cloud.coord(node)[0]);
    println!("{:>10} {:>12} {:>12}", "r_m", "linear", "enriched");
    for k in 0..12 {
        let r = g.r_i + 0.0025 * k as f64;
        let lin = shape_functions([r, z], &cloud, BasisSpec::LINEAR)?.value_of(node);
        let enr = shape_functions([r, z], &cloud, BasisSpec::ENRICHED)?.value_of(node);
        println!("{r:>10.4} {lin:>12.5} {enr:>12.5}");
    }
    Ok(())
}
