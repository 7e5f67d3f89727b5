//! Radial steady conduction: the closed-form profile for a cylinder with a
//! fixed inner temperature and convective outer surface, and the reduction of
//! a two-layer wall (aluminum, fiberglass) to one effective convection
//! coefficient at the soil surface.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReducedBcError {
    #[error("invalid layer geometry or properties: {0}")]
    Invalid(String),
}

/// Soil surface at `r1`, aluminum shell to `r2`, fiberglass to `r_o`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeLayerSpec {
    /// m
    pub r1: f64,
    /// m
    pub r2: f64,
    /// m
    pub r_o: f64,
    /// W/(m·K)
    pub k_al: f64,
    /// W/(m·K)
    pub k_fg: f64,
    /// Ambient convection coefficient, W/(m²·K).
    pub c: f64,
    /// °C
    pub t_env: f64,
}

impl CompositeLayerSpec {
    pub fn validate(&self) -> Result<(), ReducedBcError> {
        let ok = self.r1 > 0.0
            && self.r1 <= self.r2
            && self.r2 <= self.r_o
            && self.k_al > 0.0
            && self.k_fg > 0.0
            && self.c > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ReducedBcError::Invalid(format!("{self:?}")))
        }
    }
}

/// Conductive resistance of the two layers per unit length and angle,
/// `ln(r2/r1)/k_Al + ln(R_o/r2)/k_FG`.
pub fn layer_resistance(spec: &CompositeLayerSpec) -> f64 {
    (spec.r2 / spec.r1).ln() / spec.k_al + (spec.r_o / spec.r2).ln() / spec.k_fg
}

/// Coefficient that gives the same steady heat loss when applied directly at
/// the soil surface: `c̄ = (R_o/r1) c / (1 + c R_o A)`.
pub fn effective_coeff(spec: &CompositeLayerSpec) -> f64 {
    let a = layer_resistance(spec);
    spec.r_o / spec.r1 * spec.c / (1.0 + spec.c * spec.r_o * a)
}

/// Steady profile `T(r) = -(A/k) ln r + B` on `[R_i, R_o]` with `T(R_i) = T0`
/// and `-k dT/dr = c (T - T_env)` at `R_o`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRadial {
    pub r_i: f64,
    pub r_o: f64,
    pub t0: f64,
    pub k: f64,
    pub c: f64,
    pub t_env: f64,
    pub a: f64,
    pub b: f64,
}

impl AnalyticRadial {
    pub fn temperature(&self, r: f64) -> f64 {
        -(self.a / self.k) * r.ln() + self.b
    }

    /// Radial heat flux `-k dT/dr`, W/m².
    pub fn flux(&self, r: f64) -> f64 {
        self.a / r
    }
}

pub fn analytic_radial_t(r_i: f64, r_o: f64, t0: f64, k: f64, c: f64, t_env: f64) -> Result<AnalyticRadial, ReducedBcError> {
    if !(r_i > 0.0 && r_o > r_i && k > 0.0 && c > 0.0) {
        return Err(ReducedBcError::Invalid(format!(
            "R_i = {r_i}, R_o = {r_o}, k = {k}, c = {c}"
        )));
    }
    let a = c * r_o * (t0 - t_env) / (1.0 + c * r_o / k * (r_o / r_i).ln());
    let b = t0 + a / k * r_i.ln();
    Ok(AnalyticRadial {
        r_i,
        r_o,
        t0,
        k,
        c,
        t_env,
        a,
        b,
    })
}
