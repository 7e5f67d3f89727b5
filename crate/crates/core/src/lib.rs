//! Meshfree axisymmetric thermo-hydraulic simulation of heated unsaturated
//! bentonite.

pub mod app;
pub mod constitutive;
pub mod reduced_bc;
pub mod rk;
pub mod scni;
pub mod solver;
pub mod swrc_dnn;
