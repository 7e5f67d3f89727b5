//! Material laws: Lu's isothermal retention curve and its fitting, hydraulic
//! and thermal conductivity, heat capacity, water density, Darcy flux and the
//! high-temperature saturation correction.
//!
//! Suction is in MPa throughout this module. The solver works in Pa and
//! converts with [`PA_PER_MPA`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PA_PER_MPA: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ConstitutiveError {
    #[error("suction must be positive, got {0} MPa")]
    NonPositiveSuction(f64),
    #[error("temperature {0} °C is outside the water-density range [0, 200]")]
    TemperatureOutOfRange(f64),
    #[error("invalid retention parameters: {0}")]
    InvalidParams(String),
    #[error("need at least {needed} samples to fit, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("fit did not converge; best residual norm {residual_norm:.3e} with {best:?}")]
    NotConverged { best: LuSwrcParams, residual_norm: f64 },
    #[error("no suction in [{lo}, {hi}] MPa gives S = {target} at T = {temperature} °C")]
    NoRoot { target: f64, temperature: f64, lo: f64, hi: f64 },
    #[error("retention model failed: {0}")]
    Model(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing column {0:?} in retention data")]
    MissingColumn(&'static str),
    #[error("bad value {value:?} in column {column} on line {line}")]
    BadValue { column: String, line: usize, value: String },
}

pub type Result<T, E = ConstitutiveError> = std::result::Result<T, E>;

/// Parameters of Lu's retention equation. `m` is always `1 - 1/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LuSwrcParams {
    pub theta_s: f64,
    pub theta_a_max: f64,
    /// MPa
    pub psi_max: f64,
    /// MPa
    pub psi_c: f64,
    /// 1/MPa
    pub alpha: f64,
    pub n: f64,
}

impl LuSwrcParams {
    pub fn m(&self) -> f64 {
        1.0 - 1.0 / self.n
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.theta_s > 0.0
            && self.theta_a_max > 0.0
            && self.theta_a_max <= self.theta_s
            && self.psi_c > 0.0
            && self.psi_max > self.psi_c
            && self.alpha > 0.0
            && self.n > 1.0;
        if ok {
            Ok(())
        } else {
            Err(ConstitutiveError::InvalidParams(format!("{self:?}")))
        }
    }
}

/// `S(ψ)` without clamping, and `dS/dψ`.
pub fn lu_swrc_raw(psi: f64, p: &LuSwrcParams) -> (f64, f64) {
    let m = p.m();
    let e = (m * (1.0 - p.psi_max / psi)).exp();
    let de = e * m * p.psi_max / (psi * psi);
    let theta_a = p.theta_a_max * (1.0 - e);
    let dtheta_a = -p.theta_a_max * de;

    let u = std::f64::consts::SQRT_2 * (psi - p.psi_c) / p.psi_c;
    let fc = 0.5 * (1.0 - libm::erf(u));
    let dfc = -(-u * u).exp() / std::f64::consts::PI.sqrt() * std::f64::consts::SQRT_2 / p.psi_c;

    let ap = (p.alpha * psi).powf(p.n);
    let base = 1.0 + ap;
    let expo = 1.0 / p.n - 1.0;
    let g = base.powf(expo);
    let dg = expo * base.powf(expo - 1.0) * p.n * ap / psi;

    let free = p.theta_s - theta_a;
    let theta_c = fc * free * g;
    let dtheta_c = dfc * free * g - fc * dtheta_a * g + fc * free * dg;
    ((theta_a + theta_c) / p.theta_s, (dtheta_a + dtheta_c) / p.theta_s)
}

/// Degree of saturation from Lu's equation, clamped to `[0, 1]`.
pub fn lu_swrc(psi: f64, p: &LuSwrcParams) -> Result<f64> {
    lu_swrc_with_slope(psi, p).map(|(s, _)| s)
}

/// Clamped saturation and its slope `dS/dψ` (zero where the clamp is active).
pub fn lu_swrc_with_slope(psi: f64, p: &LuSwrcParams) -> Result<(f64, f64)> {
    if !(psi > 0.0) {
        return Err(ConstitutiveError::NonPositiveSuction(psi));
    }
    let (s, ds) = lu_swrc_raw(psi, p);
    if s > 1.0 {
        Ok((1.0, 0.0))
    } else if s < 0.0 {
        Ok((0.0, 0.0))
    } else {
        Ok((s, ds))
    }
}

/// One `(T, ψ, S)` retention observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    /// °C
    pub temperature: f64,
    /// MPa
    pub psi: f64,
    pub saturation: f64,
}

/// Options for [`fit_lu`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iterations: usize,
    /// Upper bound on `ψ_max`, MPa.
    pub psi_max_cap: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 24,
            seed: 0,
            max_iterations: 2000,
            psi_max_cap: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LuFit {
    pub params: LuSwrcParams,
    /// `‖S_model - S_data‖₂`
    pub residual_norm: f64,
    pub iterations: usize,
    pub start: usize,
}

const FREE_PARAMS: usize = 5;

/// Least-squares fit of the five free Lu parameters with `θ_s` fixed.
///
/// Parameters are searched in a transformed box: log scale for `ψ_max`, `ψ_c`
/// and `α`, linear for `θ_a,max` and `n`. Each start runs a reflective
/// Levenberg-Marquardt iteration. The first start is the center of a
/// data-informed start box, the rest are drawn from it with a seeded
/// generator, so results are reproducible.
pub fn fit_lu(samples: &[(f64, f64)], theta_s: f64, opts: &FitOptions) -> Result<LuFit> {
    if samples.len() < FREE_PARAMS {
        return Err(ConstitutiveError::TooFewSamples {
            needed: FREE_PARAMS,
            got: samples.len(),
        });
    }
    if let Some(&(psi, _)) = samples.iter().find(|(psi, _)| !(*psi > 0.0)) {
        return Err(ConstitutiveError::NonPositiveSuction(psi));
    }
    let psi_hi = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    let lo = [1e-4, psi_hi.ln(), 1e-4f64.ln(), 1e-4f64.ln(), 1.05];
    let hi = [theta_s, opts.psi_max_cap.max(psi_hi * 1.0001).ln(), psi_hi.ln(), 10f64.ln(), 10.0];
    let decode = |x: &[f64; FREE_PARAMS]| LuSwrcParams {
        theta_s,
        theta_a_max: x[0],
        psi_max: x[1].exp(),
        psi_c: x[2].exp(),
        alpha: x[3].exp(),
        n: x[4],
    };
    let residual = |x: &[f64; FREE_PARAMS], out: &mut Vec<f64>| {
        let p = decode(x);
        out.clear();
        out.extend(samples.iter().map(|&(psi, s)| lu_swrc_raw(psi, &p).0 - s));
    };

    // Starts come from a sub-box tied to the data: with ψ_c far below the
    // sampled suctions the capillary factor is flat zero and the search stalls.
    let psi_lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let start_lo = [0.02f64.min(theta_s), lo[1], psi_lo.ln(), 1e-2f64.ln(), 1.05];
    let start_hi = [theta_s, (20.0 * psi_hi).ln().min(hi[1]), hi[2], hi[3], 3.0];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(LuFit, bool)> = None;
    for start in 0..opts.starts.max(1) {
        let x0: [f64; FREE_PARAMS] = if start == 0 {
            std::array::from_fn(|k| 0.5 * (start_lo[k] + start_hi[k]))
        } else {
            std::array::from_fn(|k| rng.random_range(start_lo[k]..start_hi[k]))
        };
        let run = levenberg_marquardt(x0, &lo, &hi, &residual, opts.max_iterations);
        let fit = LuFit {
            params: decode(&run.x),
            residual_norm: run.cost.sqrt(),
            iterations: run.iterations,
            start,
        };
        let better = best.as_ref().is_none_or(|(b, _)| fit.residual_norm < b.residual_norm);
        if better {
            best = Some((fit, run.converged));
        }
    }
    let (fit, converged) = best.expect("at least one start");
    if !converged || !fit.residual_norm.is_finite() {
        return Err(ConstitutiveError::NotConverged {
            best: fit.params,
            residual_norm: fit.residual_norm,
        });
    }
    Ok(fit)
}

struct LmRun<const N: usize> {
    x: [f64; N],
    cost: f64,
    iterations: usize,
    converged: bool,
}

/// Reflects `v` back into `[lo, hi]`.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let mut v = v;
    if v > hi {
        v = hi - (v - hi);
    }
    if v < lo {
        v = lo + (lo - v);
    }
    v.clamp(lo, hi)
}

fn levenberg_marquardt<const N: usize>(
    x0: [f64; N],
    lo: &[f64; N],
    hi: &[f64; N],
    residual: &impl Fn(&[f64; N], &mut Vec<f64>),
    max_iterations: usize,
) -> LmRun<N> {
    use nalgebra::{DMatrix, DVector, SMatrix, SVector};

    let mut x = x0;
    let mut r = Vec::new();
    residual(&x, &mut r);
    let m = r.len();
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let mut cost = sq(&r);
    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut trial = Vec::with_capacity(m);
    let mut jac = DMatrix::<f64>::zeros(m, N);
    let mut iterations = 0;
    let mut converged = false;
    let mut fresh_jacobian = true;

    while iterations < max_iterations {
        iterations += 1;
        if fresh_jacobian {
            for k in 0..N {
                let h = 1e-7 * x[k].abs().max(1.0);
                let mut xp = x;
                let mut xm = x;
                xp[k] = (x[k] + h).min(hi[k]);
                xm[k] = (x[k] - h).max(lo[k]);
                let span = xp[k] - xm[k];
                residual(&xp, &mut trial);
                let fp = trial.clone();
                residual(&xm, &mut trial);
                for i in 0..m {
                    jac[(i, k)] = (fp[i] - trial[i]) / span;
                }
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj: SMatrix<f64, N, N> = SMatrix::from_iterator((jac.transpose() * &jac).iter().copied());
        let g: SVector<f64, N> = SVector::from_iterator((jac.transpose() * &rv).iter().copied());

        // components pinned at a bound with the gradient pushing outward stay put
        let active: [bool; N] = std::array::from_fn(|k| {
            let span = 1e-12 * (hi[k] - lo[k]);
            (x[k] <= lo[k] + span && g[k] > 0.0) || (x[k] >= hi[k] - span && g[k] < 0.0)
        });
        let pg = (0..N)
            .filter(|&k| !active[k])
            .map(|k| g[k].abs())
            .fold(0.0, f64::max);
        if cost < 1e-30 || pg < 1e-16 {
            converged = true;
            break;
        }

        let mut a = jtj;
        let mut rhs = -g;
        for k in 0..N {
            if active[k] {
                for j in 0..N {
                    a[(k, j)] = 0.0;
                    a[(j, k)] = 0.0;
                }
                a[(k, k)] = 1.0;
                rhs[k] = 0.0;
            } else {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
        }
        let Some(step) = a.cholesky().map(|c| c.solve(&rhs)) else {
            lambda *= nu;
            nu *= 2.0;
            fresh_jacobian = false;
            continue;
        };
        let xn: [f64; N] = std::array::from_fn(|k| reflect(x[k] + step[k], lo[k], hi[k]));
        let dx = SVector::<f64, N>::from_fn(|k, _| xn[k] - x[k]);
        residual(&xn, &mut trial);
        let new_cost = sq(&trial);
        let jdx = &jac * DVector::from_column_slice(dx.as_slice());
        let predicted = cost - (&rv + &jdx).norm_squared();
        let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { -1.0 };

        if rho > 0.0 && new_cost.is_finite() {
            let dx_norm = dx.norm();
            let x_norm = SVector::<f64, N>::from_column_slice(&x).norm();
            let rel_drop = (cost - new_cost) / cost.max(1e-300);
            x = xn;
            std::mem::swap(&mut r, &mut trial);
            cost = new_cost;
            lambda *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
            fresh_jacobian = true;
            if dx_norm <= 1e-15 * (x_norm + 1e-15) || (rel_drop < 1e-15 && cost < 1e-20) {
                converged = true;
                break;
            }
        } else {
            lambda *= nu;
            nu *= 2.0;
            fresh_jacobian = false;
            if lambda > 1e16 {
                // no descent possible along the damped direction
                converged = pg <= 1e-8 * (1.0 + cost.sqrt());
                break;
            }
        }
    }
    LmRun {
        x,
        cost,
        iterations,
        converged,
    }
}

/// Van Genuchten-Mualem relative conductivity and its slope in `S_e`.
///
/// `S_e` is clamped to `[0, 1]`. The slope is taken one-sided at the ends.
pub fn vgm_relative(se: f64, m: f64) -> (f64, f64) {
    let se = se.clamp(0.0, 1.0);
    if se == 0.0 {
        return (0.0, 0.0);
    }
    let x = se.powf(1.0 / m);
    let inner = 1.0 - x;
    let bracket = 1.0 - inner.powf(m);
    let kr = se.sqrt() * bracket * bracket;
    // d/dSe of [1 - (1 - Se^(1/m))^m] = (1 - x)^(m-1) x / Se
    let dbracket = if inner > 0.0 { inner.powf(m - 1.0) * x / se } else { 0.0 };
    let dkr = 0.5 / se.sqrt() * bracket * bracket + se.sqrt() * 2.0 * bracket * dbracket;
    (kr, dkr)
}

/// Hydraulic conductivity `k_s · S_e^½ [1 - (1 - S_e^{1/m})^m]²`.
pub fn vgm_hcf(se: f64, k_s: f64, m: f64) -> f64 {
    k_s * vgm_relative(se, m).0
}

/// Logistic saturation shape for the thermal conductivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcfShape {
    pub s0: f64,
    pub b: f64,
}

impl Default for TcfShape {
    fn default() -> Self {
        Self { s0: 0.5, b: 3.0 }
    }
}

impl TcfShape {
    /// Normalized shape `f(S)` with `f(0) = 0`, `f(1) = 1`, and `df/dS`.
    pub fn eval(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, 1.0);
        let g1 = 1.0 / (1.0 + self.s0.powf(self.b));
        if s == 0.0 {
            return (0.0, 0.0);
        }
        let q = (s / self.s0).powf(-self.b);
        let g = 1.0 / (1.0 + q);
        let dg = g * g * q * self.b / s;
        (g / g1, dg / g1)
    }
}

/// Quadratic density about the 4 °C maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    /// kg/m³
    pub rho_max: f64,
    /// °C
    pub t_max: f64,
    /// kg/(m³·K²)
    pub curvature: f64,
}

impl Default for DensityModel {
    fn default() -> Self {
        Self {
            rho_max: 999.97,
            t_max: 4.0,
            curvature: 4.51e-3,
        }
    }
}

/// Porous-medium and fluid properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaterialParams {
    pub porosity: f64,
    /// 1/K
    pub alpha_s: f64,
    /// Saturated hydraulic conductivity, m/s.
    pub k_s: f64,
    /// Van Genuchten-Mualem exponent of the conductivity curve.
    pub vgm_m: f64,
    /// Floor on relative conductivity, keeps very dry cells from decoupling.
    pub kr_min: f64,
    /// Thermo-osmotic permeability, m²/(s·K).
    pub k_o: f64,
    /// W/(m·K)
    pub k_dry: f64,
    /// W/(m·K)
    pub k_sat: f64,
    /// Solid volumetric heat capacity, J/(m³·K).
    pub c_solid: f64,
    /// Water volumetric heat capacity, J/(m³·K).
    pub c_water: f64,
    /// m/s²
    pub gravity: [f64; 2],
    pub tcf: TcfShape,
    pub density: DensityModel,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            porosity: 0.42,
            alpha_s: 1e-5,
            k_s: 2e-9,
            vgm_m: 0.45,
            kr_min: 1e-6,
            k_o: 1e-11,
            k_dry: 0.45,
            k_sat: 1.35,
            c_solid: 2.2e6,
            c_water: 4.18e6,
            gravity: [0.0, -9.81],
            tcf: TcfShape::default(),
            density: DensityModel::default(),
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.porosity > 0.0
            && self.porosity < 1.0
            && self.k_dry > 0.0
            && self.k_dry <= self.k_sat
            && self.c_solid > 0.0
            && self.c_water > 0.0
            && self.k_s >= 0.0
            && self.k_o >= 0.0
            && self.vgm_m > 0.0
            && self.vgm_m < 1.0;
        if ok {
            Ok(())
        } else {
            Err(ConstitutiveError::InvalidParams(format!("{self:?}")))
        }
    }
}

/// Thermal conductivity and volumetric heat capacity at saturation `S`.
pub fn tcf_vhcf(s: f64, p: &MaterialParams) -> (f64, f64) {
    let (k, _, c, _) = tcf_vhcf_with_slopes(s, p);
    (k, c)
}

/// `(k^T, dk^T/dS, C_v, dC_v/dS)`.
pub fn tcf_vhcf_with_slopes(s: f64, p: &MaterialParams) -> (f64, f64, f64, f64) {
    let (f, df) = p.tcf.eval(s);
    let s = s.clamp(0.0, 1.0);
    (
        p.k_dry + (p.k_sat - p.k_dry) * f,
        (p.k_sat - p.k_dry) * df,
        (1.0 - p.porosity) * p.c_solid + p.porosity * s * p.c_water,
        p.porosity * p.c_water,
    )
}

/// Water density and `dρ/dT` for `T` in °C.
pub fn water_density(t: f64, model: &DensityModel) -> Result<(f64, f64)> {
    if !(0.0..=200.0).contains(&t) {
        return Err(ConstitutiveError::TemperatureOutOfRange(t));
    }
    let d = t - model.t_max;
    Ok((model.rho_max - model.curvature * d * d, -2.0 * model.curvature * d))
}

/// `dφ/dt = -(1 - φ₀) α_s dT/dt`.
pub fn porosity_rate(t_rate: f64, porosity: f64, alpha_s: f64) -> f64 {
    -(1.0 - porosity) * alpha_s * t_rate
}

/// Water flux `q = -k^w (∇p - S ρ g) - k^o ∇T`.
///
/// `k_w` multiplies a pressure gradient, so it is a mobility in m²/(Pa·s).
pub fn darcy_flux(grad_p: [f64; 2], grad_t: [f64; 2], s: f64, rho: f64, k_w: f64, k_o: f64, g: [f64; 2]) -> [f64; 2] {
    std::array::from_fn(|k| -k_w * (grad_p[k] - s * rho * g[k]) - k_o * grad_t[k])
}

/// Center and width of the high-temperature saturation correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionParams {
    /// °C
    pub t_cr: f64,
    /// °C
    pub c_s: f64,
}

impl Default for CorrectionParams {
    fn default() -> Self {
        Self { t_cr: 80.0, c_s: 20.0 }
    }
}

/// `H(T) = ½ (1 - tanh((T - T_cr)/c_s))`.
pub fn correction_h(t: f64, cp: &CorrectionParams) -> f64 {
    correction_h_with_slope(t, cp).0
}

pub fn correction_h_with_slope(t: f64, cp: &CorrectionParams) -> (f64, f64) {
    let th = ((t - cp.t_cr) / cp.c_s).tanh();
    (0.5 * (1.0 - th), -0.5 * (1.0 - th * th) / cp.c_s)
}

/// Saturation and its partial derivatives at one `(T, ψ)` state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SaturationState {
    pub s: f64,
    /// 1/MPa
    pub ds_dpsi: f64,
    /// 1/K
    pub ds_dt: f64,
}

/// A temperature-dependent retention model. `T` in °C, `ψ` in MPa.
pub trait SaturationModel: Send + Sync {
    fn saturation(&self, t: f64, psi: f64) -> Result<SaturationState>;

    /// Suction range (MPa) over which the model is trusted, if it has one.
    fn suction_range(&self) -> Option<[f64; 2]> {
        None
    }
}

/// `S̃ = H(T) S(ψ, T)` with product-rule derivatives.
pub fn corrected_saturation(
    psi: f64,
    t: f64,
    model: &(impl SaturationModel + ?Sized),
    cp: &CorrectionParams,
) -> Result<SaturationState> {
    let base = model.saturation(t, psi)?;
    let (h, dh) = correction_h_with_slope(t, cp);
    Ok(SaturationState {
        s: h * base.s,
        ds_dpsi: h * base.ds_dpsi,
        ds_dt: dh * base.s + h * base.ds_dt,
    })
}

/// Lu curves fitted at a set of temperatures, linearly blended in `T`.
///
/// Outside the fitted range the nearest curve is used unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLuTable {
    pub temperatures: Vec<f64>,
    pub params: Vec<LuSwrcParams>,
}

impl FittedLuTable {
    pub fn new(mut rows: Vec<(f64, LuSwrcParams)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(ConstitutiveError::InvalidParams("empty fit table".into()));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, p) in &rows {
            p.validate()?;
        }
        Ok(Self {
            temperatures: rows.iter().map(|r| r.0).collect(),
            params: rows.iter().map(|r| r.1).collect(),
        })
    }
}

impl SaturationModel for FittedLuTable {
    fn saturation(&self, t: f64, psi: f64) -> Result<SaturationState> {
        let ts = &self.temperatures;
        let k = ts.partition_point(|&x| x <= t);
        if k == 0 || k == ts.len() {
            let idx = if k == 0 { 0 } else { ts.len() - 1 };
            let (s, ds) = lu_swrc_with_slope(psi, &self.params[idx])?;
            return Ok(SaturationState {
                s,
                ds_dpsi: ds,
                ds_dt: 0.0,
            });
        }
        let (t0, t1) = (ts[k - 1], ts[k]);
        let w = (t - t0) / (t1 - t0);
        let (s0, d0) = lu_swrc_with_slope(psi, &self.params[k - 1])?;
        let (s1, d1) = lu_swrc_with_slope(psi, &self.params[k])?;
        Ok(SaturationState {
            s: (1.0 - w) * s0 + w * s1,
            ds_dpsi: (1.0 - w) * d0 + w * d1,
            ds_dt: (s1 - s0) / (t1 - t0),
        })
    }
}

/// Smooth reference family of Lu curves whose parameters vary linearly in `T`.
///
/// Used to synthesize retention measurements when no laboratory data is
/// supplied. Over `ψ ∈ [0.5, 120]` MPa and `T ∈ [24, 120]` °C it spans
/// saturations of roughly 0.14 to 0.83.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRetention {
    pub theta_s: f64,
    /// Values at 24 °C.
    pub cold: [f64; 5],
    /// Values at 120 °C.
    pub hot: [f64; 5],
}

impl Default for SyntheticRetention {
    fn default() -> Self {
        Self {
            theta_s: 0.42,
            // theta_a_max, psi_max, psi_c, alpha, n
            cold: [0.19, 450.0, 30.0, 3.2, 1.45],
            hot: [0.12, 300.0, 18.0, 4.2, 1.50],
        }
    }
}

impl SyntheticRetention {
    pub const T_COLD: f64 = 24.0;
    pub const T_HOT: f64 = 120.0;

    pub fn params_at(&self, t: f64) -> LuSwrcParams {
        let x = (t - Self::T_COLD) / (Self::T_HOT - Self::T_COLD);
        let v: [f64; 5] = std::array::from_fn(|k| self.cold[k] + (self.hot[k] - self.cold[k]) * x);
        LuSwrcParams {
            theta_s: self.theta_s,
            theta_a_max: v[0],
            psi_max: v[1],
            psi_c: v[2],
            alpha: v[3],
            n: v[4],
        }
    }

    /// Exact points `(T, ψ(S), S)` for each temperature and saturation level.
    pub fn measurements(&self, temperatures: &[f64], levels: &[f64]) -> Result<Vec<RetentionPoint>> {
        let mut out = Vec::with_capacity(temperatures.len() * levels.len());
        for &t in temperatures {
            let p = self.params_at(t);
            for &s in levels {
                let psi = invert_curve(|psi| lu_swrc_raw(psi, &p).0, s, t, [1e-3, 1e4])?;
                out.push(RetentionPoint {
                    temperature: t,
                    psi,
                    saturation: s,
                });
            }
        }
        Ok(out)
    }
}

impl SaturationModel for SyntheticRetention {
    fn saturation(&self, t: f64, psi: f64) -> Result<SaturationState> {
        let (s, ds) = lu_swrc_with_slope(psi, &self.params_at(t))?;
        let h = 1e-4;
        let sp = lu_swrc(psi, &self.params_at(t + h))?;
        let sm = lu_swrc(psi, &self.params_at(t - h))?;
        Ok(SaturationState {
            s,
            ds_dpsi: ds,
            ds_dt: (sp - sm) / (2.0 * h),
        })
    }
}

/// Bisection in `log ψ` for a decreasing curve `S(ψ) = target`.
fn invert_curve(curve: impl Fn(f64) -> f64, target: f64, t: f64, range: [f64; 2]) -> Result<f64> {
    let (mut a, mut b) = (range[0].ln(), range[1].ln());
    let fa = curve(range[0]) - target;
    let fb = curve(range[1]) - target;
    if fa.signum() == fb.signum() {
        return Err(ConstitutiveError::NoRoot {
            target,
            temperature: t,
            lo: range[0],
            hi: range[1],
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let fm = curve(mid.exp()) - target;
        if (fm > 0.0) == (fa > 0.0) {
            a = mid;
        } else {
            b = mid;
        }
        if b - a < 1e-15 {
            break;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

/// Suction at which `model` gives saturation `target` at temperature `t`.
pub fn solve_suction(
    model: &(impl SaturationModel + ?Sized),
    target: f64,
    t: f64,
    range: [f64; 2],
) -> Result<f64> {
    let f = |psi: f64| model.saturation(t, psi).map(|st| st.s).unwrap_or(f64::NAN);
    invert_curve(f, target, t, range)
}

fn column(headers: &csv::StringRecord, names: &[&str], label: &'static str) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.contains(&h.trim()))
        .ok_or(ConstitutiveError::MissingColumn(label))
}

fn parse_field(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("");
    raw.trim().parse().map_err(|_| ConstitutiveError::BadValue {
        column: name.to_string(),
        line,
        value: raw.to_string(),
    })
}

/// Reads `(T, ψ, S)` triples. Headers `T_C`/`T`, `psi_MPa`/`psi` and `S` are accepted.
pub fn read_retention_csv(path: impl AsRef<Path>) -> Result<Vec<RetentionPoint>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let it = column(&headers, &["T_C", "T"], "T_C")?;
    let ip = column(&headers, &["psi_MPa", "psi"], "psi_MPa")?;
    let is = column(&headers, &["S"], "S")?;
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        out.push(RetentionPoint {
            temperature: parse_field(&rec, it, "T_C", line)?,
            psi: parse_field(&rec, ip, "psi_MPa", line)?,
            saturation: parse_field(&rec, is, "S", line)?,
        });
    }
    Ok(out)
}

pub fn write_retention_csv(path: impl AsRef<Path>, points: &[RetentionPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T_C", "psi_MPa", "S"])?;
    for p in points {
        w.write_record([p.temperature.to_string(), p.psi.to_string(), p.saturation.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

const FIT_HEADER: [&str; 9] = [
    "T_C",
    "theta_s",
    "theta_a_max",
    "psi_max_MPa",
    "psi_c_MPa",
    "alpha_per_MPa",
    "n",
    "m",
    "residual_norm",
];

/// One row per temperature: 5 free parameters plus the fixed `θ_s` and `m`.
pub fn write_fit_csv(path: impl AsRef<Path>, rows: &[(f64, LuFit)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FIT_HEADER)?;
    for (t, fit) in rows {
        let p = &fit.params;
        w.write_record(
            [t, &p.theta_s, &p.theta_a_max, &p.psi_max, &p.psi_c, &p.alpha, &p.n, &p.m(), &fit.residual_norm]
                .map(|v| v.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fit_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, LuSwrcParams)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let idx: Vec<usize> = FIT_HEADER[..7]
        .iter()
        .map(|&name| column(&headers, &[name], name))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = idx
            .iter()
            .zip(FIT_HEADER)
            .map(|(&i, name)| parse_field(&rec, i, name, k + 2))
            .collect::<Result<_>>()?;
        out.push((
            v[0],
            LuSwrcParams {
                theta_s: v[1],
                theta_a_max: v[2],
                psi_max: v[3],
                psi_c: v[4],
                alpha: v[5],
                n: v[6],
            },
        ));
    }
    Ok(out)
}
