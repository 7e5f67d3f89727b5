//! Coupled temperature and water-pressure solver on the axisymmetric nodally
//! integrated RK discretization.
//!
//! Unknowns are the RK coefficients `τ_I` (temperature, enriched shapes) and
//! `d_I` (pressure, linear shapes), ordered as `[τ; d]`. Time integration is
//! backward Euler with a monolithic Newton solve. The water storage is written
//! in conservative form, `φ₀ (ρS - ρⁿSⁿ)/Δt`, which linearizes to the rate
//! form of the mass balance and conserves mass exactly at convergence.

use std::path::Path;
use std::sync::Arc;

use faer::prelude::*;
use faer::sparse::linalg::solvers::SymbolicLu;
use faer::sparse::{SparseColMat, SymbolicSparseColMat, Triplet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{
    self, solve_suction, tcf_vhcf_with_slopes, vgm_relative, water_density, ConstitutiveError,
    CorrectionParams, MaterialParams, SaturationModel, SaturationState, PA_PER_MPA,
};
use crate::rk::{shape_functions, BasisSpec, NodeCloud, RkApproximation, RkError, RkShapeSet};
use crate::scni::{build_rect_partition, smooth_partition, CellPartition, CellShapes, GradientForm, ScniError, Side};

/// Unit weight of water used to turn conductivity (m/s) into mobility, Pa/m.
pub const WATER_UNIT_WEIGHT: f64 = 9810.0;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("constitutive evaluation failed in cell {cell}: {source}")]
    Constitutive {
        cell: usize,
        #[source]
        source: ConstitutiveError,
    },
    #[error(transparent)]
    Scni(#[from] ScniError),
    #[error(transparent)]
    Rk(#[from] RkError),
    #[error("no Dirichlet nodes on the heater boundary")]
    NoConstraints,
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("time step fell below {dt_min} s at t = {time} s")]
    StepUnderflow { time: f64, dt_min: f64 },
    #[error("sensor {id} at ({r}, {z}) lies outside the domain")]
    SensorOutsideDomain { id: usize, r: f64, z: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SolverError> = std::result::Result<T, E>;

/// A value constant in time or piecewise linear in a `(time s, value)` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    Table(Vec<(f64, f64)>),
}

impl Schedule {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::Table(rows) => {
                let k = rows.partition_point(|r| r.0 <= t);
                if k == 0 {
                    rows[0].1
                } else if k == rows.len() {
                    rows[k - 1].1
                } else {
                    let (a, b) = (rows[k - 1], rows[k]);
                    a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
                }
            }
        }
    }

    /// Reads a two-column `time_s,value` table.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in reader.deserialize::<(f64, f64)>() {
            rows.push(rec?);
        }
        if rows.is_empty() {
            return Err(SolverError::Config("empty schedule table".into()));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Schedule::Table(rows))
    }

    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Schedule::Constant(v) if v.is_finite() => Ok(()),
            Schedule::Table(rows) if !rows.is_empty() && rows.windows(2).all(|w| w[0].0 < w[1].0) => Ok(()),
            _ => Err(SolverError::Config(format!("schedule {name} is empty, unsorted or not finite"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    /// Heater radius, m.
    pub r_i: f64,
    /// Soil outer radius, m.
    pub r_o: f64,
    /// m
    pub height: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            r_i: 0.00625,
            r_o: 0.2773,
            height: 0.2105,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub nr: usize,
    pub nz: usize,
    /// Ratio of consecutive radial spacings, finest at the heater.
    pub grading: f64,
    pub support_factor: f64,
    /// Adds `ln(r/r_I)` to the temperature basis.
    pub enriched: bool,
    /// Radius beyond which the log column is dropped.
    pub log_cutoff: Option<f64>,
    /// Smoothing of the test-function gradients. Trial gradients always use
    /// the cylindrical measure.
    pub test_gradient: GradientForm,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nr: 48,
            nz: 32,
            grading: 1.02,
            support_factor: crate::rk::DEFAULT_SUPPORT_FACTOR,
            enriched: true,
            log_cutoff: None,
            test_gradient: GradientForm::Cartesian,
        }
    }
}

/// How the heater temperature is imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirichletMethod {
    /// Heater kernels made singular at their nodes, so `T^h(x_J) = τ_J`.
    SingularKernel,
    /// Rows replaced by `Σ_I Ψ̄_I(x_J) τ_I = T̄`.
    Collocation,
}

/// A per-wall value; `None` on a convective entry means insulated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Walls<T> {
    pub inner: T,
    pub outer: T,
    pub bottom: T,
    pub top: T,
}

impl<T: Copy> Walls<T> {
    pub fn get(&self, side: Side) -> T {
        match side {
            Side::Inner => self.inner,
            Side::Outer => self.outer,
            Side::Bottom => self.bottom,
            Side::Top => self.top,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryConfig {
    /// Heater temperature, °C.
    pub heater: Schedule,
    pub dirichlet: DirichletMethod,
    /// Effective convection coefficient per wall, W/(m²·K).
    pub convection: Walls<Option<f64>>,
    /// Ambient temperature, °C.
    pub t_env: Schedule,
    /// Prescribed outward water flux `n·q̄` per wall, m/s.
    pub water_flux: Walls<f64>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            heater: Schedule::Constant(200.0),
            dirichlet: DirichletMethod::SingularKernel,
            convection: Walls {
                inner: None,
                outer: Some(2.0),
                bottom: Some(2.0),
                top: Some(2.0),
            },
            t_env: Schedule::Constant(22.0),
            water_flux: Walls {
                inner: 0.0,
                outer: 0.0,
                bottom: 0.0,
                top: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeConfig {
    /// s
    pub dt_initial: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    /// Step growth after an easy Newton solve.
    pub growth: f64,
    /// s
    pub t_end: f64,
    pub newton: NewtonOptions,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            dt_initial: 60.0,
            dt_min: 1e-3,
            dt_max: 3600.0,
            growth: 1.5,
            t_end: 500.0 * 3600.0,
            newton: NewtonOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Relative reduction of each residual block.
    pub rtol: f64,
    /// Absolute floor for heat rows, W.
    pub atol_heat: f64,
    /// Absolute floor for mass rows, kg/s.
    pub atol_mass: f64,
    /// Relative update size treated as converged.
    pub step_tol: f64,
    /// Looser relative tolerance accepted once the residual stops decreasing
    /// (a round-off floor).
    pub stall_rtol: f64,
    /// Maximum number of step halvings in the backtracking line search.
    pub line_search: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 12,
            rtol: 1e-9,
            atol_heat: 1e-10,
            atol_mass: 1e-18,
            step_tol: 1e-13,
            stall_rtol: 1e-6,
            line_search: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialConfig {
    /// °C
    pub temperature: f64,
    pub saturation: f64,
    /// Uniform pore pressure in Pa; derived from `saturation` when absent.
    pub pressure: Option<f64>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            temperature: 22.0,
            saturation: 0.32,
            pressure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    /// Radial distances from the heater surface, m.
    pub offsets: Vec<f64>,
    /// Probe height, m; mid-height when absent.
    pub z: Option<f64>,
    /// Adds a probe on the heater surface.
    pub include_heater_surface: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            offsets: vec![0.050, 0.070, 0.100, 0.125, 0.185],
            z: None,
            include_heater_surface: true,
        }
    }
}

/// Switches for individual coupling terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Physics {
    /// Solve for pressure; otherwise saturation stays at its initial value.
    pub hydraulics: bool,
    pub thermal_expansion: bool,
    /// Temperature-dependent water density.
    pub density_variation: bool,
    pub gravity: bool,
    pub thermo_osmosis: bool,
    /// Scale the thermo-osmotic permeability by the same relative
    /// conductivity as `k_w`, so the osmotic flux fades as the soil dries.
    pub relative_osmosis: bool,
    /// Heat carried by the water flux.
    pub advection: bool,
    /// Replaces the saturation-dependent thermal conductivity, W/(m·K).
    pub conductivity: Option<f64>,
    /// Replaces the volumetric heat capacity, J/(m³·K).
    pub capacity: Option<f64>,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            hydraulics: true,
            thermal_expansion: true,
            density_variation: true,
            gravity: true,
            thermo_osmosis: true,
            relative_osmosis: true,
            advection: true,
            conductivity: None,
            capacity: None,
        }
    }
}

impl Physics {
    /// Linear conduction with constant properties.
    pub fn conduction(k: f64, capacity: Option<f64>) -> Self {
        Self {
            hydraulics: false,
            thermal_expansion: false,
            density_variation: false,
            gravity: false,
            thermo_osmosis: false,
            relative_osmosis: false,
            advection: false,
            conductivity: Some(k),
            capacity,
        }
    }
}

/// Which retention model drives the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SwrcSource {
    /// Trained network stored as JSON.
    Dnn { model: Option<std::path::PathBuf> },
    /// Fitted Lu curves from a CSV written by the fitting step.
    FittedLu { fits: std::path::PathBuf },
    /// The built-in synthetic reference family.
    Synthetic,
}

/// Saturation fed to the relative conductivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityBasis {
    /// Retention-curve saturation before the high-temperature correction.
    Uncorrected,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwrcConfig {
    pub source: SwrcSource,
    pub correction: Option<CorrectionParams>,
    /// Width (MPa) of the smooth floor `f ln(1 + e^(ψ/f))` applied to suction
    /// before the retention model sees it. Keeps positive pore pressure on a
    /// flat, saturated branch.
    pub psi_floor: f64,
    /// Width of a smooth positive floor on the model saturation. A fitted
    /// network can dip slightly below zero at high temperature and suction.
    pub s_floor: f64,
    /// Suction (MPa) above which the retention curve is held flat through a
    /// smooth cap. `None` uses the upper end of the model's own suction range.
    pub psi_cap: Option<f64>,
    pub mobility: MobilityBasis,
}

impl Default for SwrcConfig {
    fn default() -> Self {
        Self {
            source: SwrcSource::Dnn { model: None },
            correction: Some(CorrectionParams::default()),
            psi_floor: 0.1,
            s_floor: 5e-3,
            psi_cap: None,
            mobility: MobilityBasis::Uncorrected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Sensor sampling interval, s.
    pub sensor_interval: f64,
    /// Full-field snapshot interval, s.
    pub snapshot_interval: Option<f64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            sensor_interval: 3600.0,
            snapshot_interval: None,
        }
    }
}

/// Everything needed to set up and run a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SimConfig {
    pub geometry: Geometry,
    pub grid: GridConfig,
    pub material: MaterialParams,
    pub swrc: SwrcConfig,
    pub boundary: BoundaryConfig,
    pub time: TimeConfig,
    pub initial: InitialConfig,
    pub sensors: SensorConfig,
    pub output: OutputConfig,
    pub physics: Physics,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if !(g.r_i > 0.0 && g.r_i < g.r_o && g.height > 0.0) {
            return Err(SolverError::Config(format!("geometry {g:?}")));
        }
        let t = &self.time;
        if !(t.dt_initial > 0.0 && t.dt_min > 0.0 && t.dt_min <= t.dt_initial && t.dt_max >= t.dt_initial) {
            return Err(SolverError::Config(format!("time stepping {t:?}")));
        }
        if !(t.newton.rtol > 0.0 && t.newton.max_iterations > 0) {
            return Err(SolverError::Config("Newton tolerance must be positive".into()));
        }
        if self.grid.nr < 2 || self.grid.nz < 2 {
            return Err(SolverError::Config("at least 2 x 2 nodes are needed".into()));
        }
        self.material
            .validate()
            .map_err(|e| SolverError::Config(e.to_string()))?;
        self.boundary.heater.validate("heater")?;
        self.boundary.t_env.validate("t_env")?;
        if !(self.swrc.psi_floor >= 0.0 && self.swrc.s_floor >= 0.0 && self.swrc.psi_cap.is_none_or(|c| c > 0.0)) {
            return Err(SolverError::Config("psi_floor and s_floor must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.initial.saturation) {
            return Err(SolverError::Config("initial saturation outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Sensor positions `(r, z)`.
    pub fn sensor_points(&self) -> Vec<[f64; 2]> {
        let z = self.sensors.z.unwrap_or(0.5 * self.geometry.height);
        let mut out = Vec::new();
        if self.sensors.include_heater_surface {
            out.push([self.geometry.r_i, z]);
        }
        out.extend(self.sensors.offsets.iter().map(|d| [self.geometry.r_i + d, z]));
        out
    }
}

/// Shape data at one boundary quadrature point.
#[derive(Debug, Clone)]
pub struct BoundaryPoint {
    pub side: Side,
    pub point: [f64; 2],
    /// `2π r w` for the Gauss weight `w`.
    pub weight: f64,
    pub t_nodes: Vec<usize>,
    pub t_values: Vec<f64>,
    pub p_nodes: Vec<usize>,
    pub p_values: Vec<f64>,
}

/// One constrained temperature row: `Σ_c coeff_c τ_c = T̄`.
#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub node: usize,
    pub nodes: Vec<usize>,
    pub coeffs: Vec<f64>,
}

/// Node clouds, smoothed cell data and boundary data of a configuration.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub partition: CellPartition,
    pub t_cloud: NodeCloud,
    pub p_cloud: NodeCloud,
    pub t_spec: BasisSpec,
    pub t_cells: Vec<CellShapes>,
    pub p_cells: Vec<CellShapes>,
    /// Test-function gradients, aligned with `t_cells` and `p_cells`.
    pub t_test: Vec<TestGradients>,
    pub p_test: Vec<TestGradients>,
    pub boundary: Vec<BoundaryPoint>,
    pub constraints: Vec<ConstraintRow>,
}

impl Discretization {
    pub fn new(config: &SimConfig) -> Result<Self> {
        let g = &config.geometry;
        let grid = &config.grid;
        let partition = build_rect_partition(
            [g.r_i, g.r_o],
            [0.0, g.height],
            grid.nr,
            grid.nz,
            Some(grid.grading),
        )?;
        let heater = partition.side_nodes(Side::Inner);
        Self::with_constraints(config, partition, &heater)
    }

    /// Builds the discretization with the temperature fixed at `fixed` nodes.
    pub fn with_constraints(config: &SimConfig, partition: CellPartition, fixed: &[usize]) -> Result<Self> {
        if fixed.is_empty() {
            return Err(SolverError::NoConstraints);
        }
        let grid = &config.grid;
        let p_cloud = partition.cloud(grid.support_factor)?;
        let mut t_cloud = p_cloud.clone();
        if config.boundary.dirichlet == DirichletMethod::SingularKernel {
            t_cloud = t_cloud.with_singular_nodes(fixed);
        }
        let t_spec = BasisSpec {
            enriched: grid.enriched,
            log_cutoff: grid.log_cutoff,
        };
        let t_eval = RkApproximation::new(&t_cloud, t_spec);
        let p_eval = RkApproximation::new(&p_cloud, BasisSpec::LINEAR);
        let t_cells = smooth_partition(&partition, &t_eval, GradientForm::Axisymmetric)?;
        let p_cells = if config.physics.hydraulics {
            smooth_partition(&partition, &p_eval, GradientForm::Axisymmetric)?
        } else {
            Vec::new()
        };
        let test_of = |trial: &[CellShapes], eval: &RkApproximation| -> Result<Vec<TestGradients>> {
            if trial.is_empty() || grid.test_gradient == GradientForm::Axisymmetric {
                return Ok(trial.iter().map(TestGradients::of).collect());
            }
            let cells = smooth_partition(&partition, eval, grid.test_gradient)?;
            debug_assert!(cells.iter().zip(trial).all(|(a, b)| a.nodes == b.nodes));
            Ok(cells.iter().map(TestGradients::of).collect())
        };
        let t_test = test_of(&t_cells, &t_eval)?;
        let p_test = test_of(&p_cells, &p_eval)?;

        let mut boundary = Vec::new();
        for cell in &partition.cells {
            for edge in cell.boundary_edges() {
                let side = edge.boundary.expect("boundary edge");
                let convective = config.boundary.convection.get(side).is_some();
                let flux = config.physics.hydraulics && config.boundary.water_flux.get(side) != 0.0;
                if !convective && !flux {
                    continue;
                }
                for (point, w) in edge.quadrature() {
                    let t = shape_functions(point, &t_cloud, t_spec)?;
                    let (p_nodes, p_values) = if config.physics.hydraulics {
                        let p = shape_functions(point, &p_cloud, BasisSpec::LINEAR)?;
                        (p.nodes, p.values)
                    } else {
                        (Vec::new(), Vec::new())
                    };
                    boundary.push(BoundaryPoint {
                        side,
                        point,
                        weight: 2.0 * std::f64::consts::PI * point[0] * w,
                        t_nodes: t.nodes,
                        t_values: t.values,
                        p_nodes,
                        p_values,
                    });
                }
            }
        }

        let coords = partition.node_coords();
        let constraints = fixed
            .iter()
            .map(|&j| {
                let set = shape_functions(coords[j], &t_cloud, t_spec)?;
                Ok(match config.boundary.dirichlet {
                    DirichletMethod::SingularKernel => ConstraintRow {
                        node: j,
                        nodes: vec![j],
                        coeffs: vec![1.0],
                    },
                    DirichletMethod::Collocation => ConstraintRow {
                        node: j,
                        nodes: set.nodes,
                        coeffs: set.values,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            partition,
            t_cloud,
            p_cloud,
            t_spec,
            t_cells,
            p_cells,
            t_test,
            p_test,
            boundary,
            constraints,
        })
    }

    pub fn node_count(&self) -> usize {
        self.t_cloud.len()
    }

    pub fn t_shapes(&self, point: [f64; 2]) -> Result<RkShapeSet> {
        Ok(shape_functions(point, &self.t_cloud, self.t_spec)?)
    }

    pub fn p_shapes(&self, point: [f64; 2]) -> Result<RkShapeSet> {
        Ok(shape_functions(point, &self.p_cloud, BasisSpec::LINEAR)?)
    }

    /// `2π r_L W_L` of a cell.
    pub fn cell_weight(&self, cell: usize) -> f64 {
        let c = &self.partition.cells[cell];
        2.0 * std::f64::consts::PI * c.centroid[0] * c.area
    }
}

/// Smoothed gradients used on the test side of the weak form.
#[derive(Debug, Clone, PartialEq)]
pub struct TestGradients {
    pub grad_r: Vec<f64>,
    pub grad_z: Vec<f64>,
}

impl TestGradients {
    fn of(c: &CellShapes) -> Self {
        Self {
            grad_r: c.grad_r.clone(),
            grad_z: c.grad_z.clone(),
        }
    }
}

/// Nodal coefficients at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// s
    pub time: f64,
    /// Temperature coefficients `τ_I`.
    pub temperature: Vec<f64>,
    /// Pressure coefficients `d_I`, Pa.
    pub pressure: Vec<f64>,
    pub cells: Vec<CellMaterial>,
}

/// Material state at a cell's integration point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CellMaterial {
    pub temperature: f64,
    pub pressure: f64,
    pub saturation: f64,
    /// m²/(Pa·s)
    pub mobility: f64,
    pub conductivity: f64,
    pub capacity: f64,
    pub density: f64,
}

/// Residual and Jacobian of one nonlinear solve.
pub struct LinearizedSystem {
    pub residual: Vec<f64>,
    pub jacobian: SparseColMat<usize, f64>,
}

/// A square nonlinear system solved by [`newton`].
pub trait NonlinearSystem {
    fn len(&self) -> usize;
    fn linearize(&self, x: &[f64]) -> Result<LinearizedSystem>;
    /// Row blocks with their absolute tolerances, for convergence checks.
    fn blocks(&self) -> Vec<(std::ops::Range<usize>, f64)>;
    /// Rows excluded from the convergence norm.
    fn is_constrained(&self, _row: usize) -> bool {
        false
    }
    /// Symbolic LU reused across iterations when the pattern is fixed.
    fn symbolic(&self) -> Option<&SymbolicLu<usize>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewtonReport {
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of each free residual block before each iteration and at exit.
    pub residual_history: Vec<Vec<f64>>,
}

fn block_norms(system: &impl NonlinearSystem, r: &[f64]) -> Vec<f64> {
    system
        .blocks()
        .iter()
        .map(|(range, _)| {
            range
                .clone()
                .filter(|&i| !system.is_constrained(i))
                .fold(0.0f64, |m, i| m.max(r[i].abs()))
        })
        .collect()
}

/// Newton iteration on `system` starting from `x` (updated in place).
///
/// Steps are backtracked on the block-scaled residual norm; each accepted
/// trial's linearization is reused by the next iteration.
pub fn newton(system: &impl NonlinearSystem, x: &mut [f64], opts: &NewtonOptions) -> Result<NewtonReport> {
    let blocks = system.blocks();
    let done = |iterations, converged, residual_history| NewtonReport {
        iterations,
        converged,
        residual_history,
    };
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut lin = system.linearize(x)?;
    let mut r0: Option<Vec<f64>> = None;
    // merit scales, fixed at the first iterate that satisfies the constraints
    let mut scales: Option<Vec<f64>> = None;
    for it in 0..=opts.max_iterations {
        let norms = block_norms(system, &lin.residual);
        log::trace!("newton iteration {it}: residual {norms:?}");
        history.push(norms.clone());
        if norms.iter().any(|v| !v.is_finite()) {
            return Ok(done(it, false, history));
        }
        let r0 = r0.get_or_insert_with(|| norms.clone()).clone();
        let within = |norms: &[f64], rtol: f64| {
            norms
                .iter()
                .zip(&r0)
                .zip(&blocks)
                .all(|((n, n0), (_, atol))| *n <= rtol * n0 + atol)
        };
        let constraints_met = (0..x.len())
            .filter(|&i| system.is_constrained(i))
            .all(|i| lin.residual[i].abs() <= 1e-10 * (1.0 + x[i].abs()));
        let converged = constraints_met && within(&norms, opts.rtol);
        // a round-off floor: small but no longer decreasing
        let stalled = it >= 2
            && constraints_met
            && within(&norms, opts.stall_rtol)
            && norms.iter().zip(&history[it - 1]).all(|(n, p)| *n > 0.5 * p);
        if converged && it > 0 || converged && norms.iter().all(|n| *n == 0.0) || stalled {
            return Ok(done(it, true, history));
        }
        if it == opts.max_iterations {
            break;
        }
        let dx = solve_sparse(&lin.jacobian, &lin.residual, system.symbolic())?;
        let mut small = true;
        for (range, _) in &blocks {
            let scale = range.clone().fold(0.0f64, |m, i| m.max(x[i].abs())).max(1.0);
            let step = range.clone().fold(0.0f64, |m, i| m.max(dx[i].abs()));
            small &= step <= opts.step_tol * scale;
        }

        if constraints_met && scales.is_none() {
            scales = Some(
                norms
                    .iter()
                    .zip(&blocks)
                    .map(|(n, (_, atol))| n.max(*atol).max(f64::MIN_POSITIVE))
                    .collect(),
            );
        }
        // with unmet (linear) constraints the full step is taken to satisfy them
        let searches = if constraints_met { opts.line_search } else { 0 };
        let unit = vec![1.0; blocks.len()];
        let scales_now = scales.as_deref().unwrap_or(&unit);
        let merit = |r: &[f64]| -> f64 {
            blocks
                .iter()
                .zip(scales_now)
                .map(|((range, _), s)| {
                    range
                        .clone()
                        .filter(|&i| !system.is_constrained(i))
                        .map(|i| (r[i] / s).powi(2))
                        .sum::<f64>()
                })
                .sum()
        };
        let m0 = merit(&lin.residual);
        let mut lambda = 1.0;
        let mut accepted = None;
        for k in 0..=searches {
            let last = k == searches;
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(xi, d)| xi - lambda * d).collect();
            match system.linearize(&trial) {
                Ok(next) => {
                    let m = merit(&next.residual);
                    let good = m <= (1.0 - 1e-4 * lambda) * m0 || within(&block_norms(system, &next.residual), opts.rtol);
                    if m.is_finite() && (good || last) {
                        if k > 0 {
                            log::trace!("newton iteration {it}: step length {lambda}");
                        }
                        accepted = Some((trial, next));
                        break;
                    }
                }
                Err(e) if last => return Err(e),
                Err(_) => {}
            }
            lambda *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            return Ok(done(it + 1, false, history));
        };
        x.copy_from_slice(&trial);
        lin = next;
        if small && constraints_met {
            return Ok(done(it + 1, true, history));
        }
    }
    Ok(done(opts.max_iterations, false, history))
}

/// Solves `J x = r` with a sparse LU.
pub fn solve_sparse(
    jacobian: &SparseColMat<usize, f64>,
    rhs: &[f64],
    symbolic: Option<&SymbolicLu<usize>>,
) -> Result<Vec<f64>> {
    let fail = |e: String| SolverError::Factorization(e);
    let lu = match symbolic {
        Some(s) => faer::sparse::linalg::solvers::Lu::try_new_with_symbolic(s.clone(), jacobian.as_ref())
            .map_err(|e| fail(format!("{e:?}")))?,
        None => jacobian.sp_lu().map_err(|e| fail(format!("{e:?}")))?,
    };
    let b = Col::from_fn(rhs.len(), |i| rhs[i]);
    let x = lu.solve(&b);
    let out: Vec<f64> = (0..rhs.len()).map(|i| x[i]).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(fail("singular Jacobian".into()));
    }
    Ok(out)
}

/// Fixed sparsity pattern with scatter maps for each element.
struct Pattern {
    symbolic: SymbolicSparseColMat<usize>,
    lu: SymbolicLu<usize>,
    /// CSC value slot for each `(row, col)` pair of an element, row-major.
    cell_slots: Vec<Vec<u32>>,
    boundary_slots: Vec<Vec<u32>>,
    constraint_slots: Vec<Vec<u32>>,
}

impl Pattern {
    fn build(n: usize, cells: &[Vec<usize>], boundary: &[Vec<usize>], constraints: &[(usize, Vec<usize>)]) -> Result<Self> {
        let mut entries: Vec<Triplet<usize, usize, f64>> = Vec::new();
        for dofs in cells.iter().chain(boundary) {
            for &r in dofs {
                for &c in dofs {
                    entries.push(Triplet::new(r, c, 0.0));
                }
            }
        }
        for (row, cols) in constraints {
            entries.push(Triplet::new(*row, *row, 0.0));
            for &c in cols {
                entries.push(Triplet::new(*row, c, 0.0));
            }
        }
        for i in 0..n {
            entries.push(Triplet::new(i, i, 0.0));
        }
        entries.sort_unstable_by_key(|t| (t.col, t.row));
        entries.dedup_by_key(|t| (t.col, t.row));
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &entries)
            .map_err(|e| SolverError::Factorization(format!("{e:?}")))?;
        let symbolic = mat.symbolic().to_owned().map_err(|e| SolverError::Factorization(format!("{e:?}")))?;
        let lu = SymbolicLu::try_new(symbolic.as_ref()).map_err(|e| SolverError::Factorization(format!("{e:?}")))?;

        let col_ptr = symbolic.col_ptr();
        let row_idx = symbolic.row_idx();
        let slot = |r: usize, c: usize| -> u32 {
            let range = col_ptr[c]..col_ptr[c + 1];
            let k = row_idx[range.clone()].binary_search(&r).expect("entry in pattern");
            (range.start + k) as u32
        };
        let slots_of = |dofs: &Vec<usize>| -> Vec<u32> {
            let mut out = Vec::with_capacity(dofs.len() * dofs.len());
            for &r in dofs {
                for &c in dofs {
                    out.push(slot(r, c));
                }
            }
            out
        };
        let cell_slots = cells.par_iter().map(slots_of).collect();
        let boundary_slots = boundary.iter().map(slots_of).collect();
        let constraint_slots = constraints
            .iter()
            .map(|(row, cols)| {
                let mut out = vec![slot(*row, *row)];
                out.extend(cols.iter().map(|&c| slot(*row, c)));
                out
            })
            .collect();
        Ok(Self {
            symbolic,
            lu,
            cell_slots,
            boundary_slots,
            constraint_slots,
        })
    }

    fn nnz(&self) -> usize {
        self.symbolic.row_idx().len()
    }

    /// Rows of the pattern, per column.
    fn row_indices(&self) -> (&[usize], &[usize]) {
        (self.symbolic.col_ptr(), self.symbolic.row_idx())
    }
}

/// Per-cell linearization data at the current iterate.
#[derive(Debug, Clone, Copy, Default)]
struct CellEval {
    t: f64,
    grad_t: [f64; 2],
    p: f64,
    grad_p: [f64; 2],
    s: f64,
    s_t: f64,
    /// ∂S/∂p, 1/Pa
    s_p: f64,
    rho: f64,
    rho_t: f64,
    k_w: f64,
    /// ∂k_w/∂T and ∂k_w/∂p
    kw_t: f64,
    kw_p: f64,
    /// Thermo-osmotic permeability and its slopes in T and p.
    k_o: f64,
    ko_t: f64,
    ko_p: f64,
    k_t: f64,
    dk_t: f64,
    c_v: f64,
    dc_v: f64,
}

/// Cell values carried from the previous time level.
#[derive(Debug, Clone, Copy, Default)]
struct CellHistory {
    t: f64,
    rho_s: f64,
}

/// Backward-Euler step equations of the coupled problem.
pub struct CoupledProblem {
    pub config: SimConfig,
    pub disc: Discretization,
    model: Arc<dyn SaturationModel>,
    pattern: Pattern,
    /// Density used when its temperature dependence is switched off.
    rho_ref: f64,
    /// Saturation used when hydraulics are switched off.
    s_fixed: f64,
    /// Suction cap in MPa, resolved from the config or the model.
    psi_cap: Option<f64>,
    constrained: Vec<bool>,
}

/// One time level to be solved for.
pub struct StepEquations<'a> {
    problem: &'a CoupledProblem,
    history: Vec<CellHistory>,
    /// `None` for a steady solve.
    dt: Option<f64>,
    heater: f64,
    t_env: f64,
}

impl CoupledProblem {
    pub fn new(config: SimConfig, model: Arc<dyn SaturationModel>) -> Result<Self> {
        config.validate()?;
        let disc = Discretization::new(&config)?;
        Self::from_discretization(config, disc, model)
    }

    pub fn from_discretization(config: SimConfig, disc: Discretization, model: Arc<dyn SaturationModel>) -> Result<Self> {
        let np = disc.node_count();
        let hydraulics = config.physics.hydraulics;
        let n = if hydraulics { 2 * np } else { np };
        let cell_dofs: Vec<Vec<usize>> = (0..disc.t_cells.len())
            .map(|l| {
                let mut d = disc.t_cells[l].nodes.clone();
                if hydraulics {
                    d.extend(disc.p_cells[l].nodes.iter().map(|&i| np + i));
                }
                d
            })
            .collect();
        let boundary_dofs: Vec<Vec<usize>> = disc
            .boundary
            .iter()
            .map(|b| {
                let mut d = b.t_nodes.clone();
                d.extend(b.p_nodes.iter().map(|&i| np + i));
                d
            })
            .collect();
        let constraint_cols: Vec<(usize, Vec<usize>)> =
            disc.constraints.iter().map(|c| (c.node, c.nodes.clone())).collect();
        let pattern = Pattern::build(n, &cell_dofs, &boundary_dofs, &constraint_cols)?;
        let mut constrained = vec![false; n];
        for c in &disc.constraints {
            constrained[c.node] = true;
        }
        let rho_ref = water_density(config.initial.temperature.clamp(0.0, 200.0), &config.material.density)
            .map_err(|e| SolverError::Config(e.to_string()))?
            .0;
        let s_fixed = config.initial.saturation;
        let psi_cap = config.swrc.psi_cap.or_else(|| model.suction_range().map(|r| r[1]));
        Ok(Self {
            config,
            disc,
            model,
            pattern,
            rho_ref,
            s_fixed,
            psi_cap,
            constrained,
        })
    }

    pub fn len(&self) -> usize {
        if self.config.physics.hydraulics {
            2 * self.disc.node_count()
        } else {
            self.disc.node_count()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn model(&self) -> &Arc<dyn SaturationModel> {
        &self.model
    }

    /// Number of stored Jacobian entries.
    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    /// Whether `(row, col)` is a structural entry of the Jacobian.
    pub fn in_pattern(&self, row: usize, col: usize) -> bool {
        let (cp, ri) = self.pattern.row_indices();
        ri[cp[col]..cp[col + 1]].binary_search(&row).is_ok()
    }

    /// Corrected saturation at temperature `t` and pressure `p` (Pa).
    /// Slopes are per MPa of suction and per K.
    pub fn saturation(&self, t: f64, p: f64) -> constitutive::Result<SaturationState> {
        Ok(self.retention(t, p)?.0)
    }

    /// Corrected and uncorrected saturation states.
    fn retention(&self, t: f64, p: f64) -> constitutive::Result<(SaturationState, SaturationState)> {
        let psi = -p / PA_PER_MPA;
        let (mut psi_eff, mut slope) = soft_floor(psi, self.config.swrc.psi_floor);
        if let Some(cap) = self.psi_cap {
            let (below, s_cap) = soft_floor(cap - psi_eff, CAP_WIDTH * cap);
            psi_eff = cap - below;
            slope *= s_cap;
        }
        let mut base = self.model.saturation(t, psi_eff)?;
        let (s_pos, s_slope) = soft_floor(base.s, self.config.swrc.s_floor);
        base.s = s_pos;
        base.ds_dpsi *= slope * s_slope;
        base.ds_dt *= s_slope;
        let corrected = match &self.config.swrc.correction {
            Some(cp) => {
                let (h, dh) = constitutive::correction_h_with_slope(t, cp);
                SaturationState {
                    s: h * base.s,
                    ds_dpsi: h * base.ds_dpsi,
                    ds_dt: dh * base.s + h * base.ds_dt,
                }
            }
            None => base,
        };
        Ok((corrected, base))
    }

    fn density(&self, t: f64) -> (f64, f64) {
        if !self.config.physics.density_variation {
            return (self.rho_ref, 0.0);
        }
        // Iterates may overshoot the tabulated range near the heater; extend
        // linearly so the tangent stays continuous.
        let edge = t.clamp(0.0, 200.0);
        let (rho, drho) = water_density(edge, &self.config.material.density).expect("clamped into range");
        (rho + drho * (t - edge), drho)
    }

    fn gravity(&self) -> [f64; 2] {
        if self.config.physics.gravity {
            self.config.material.gravity
        } else {
            [0.0; 2]
        }
    }

    fn k_o(&self) -> f64 {
        if self.config.physics.thermo_osmosis {
            self.config.material.k_o
        } else {
            0.0
        }
    }

    fn alpha_s(&self) -> f64 {
        if self.config.physics.thermal_expansion {
            self.config.material.alpha_s
        } else {
            0.0
        }
    }

    fn eval_cell(&self, l: usize, tau: &[f64], d: &[f64]) -> Result<CellEval> {
        let m = &self.config.material;
        let tc = &self.disc.t_cells[l];
        let t = tc.at_centroid(tau);
        let grad_t = tc.gradient(tau);
        let mut e = CellEval {
            t,
            grad_t,
            ..Default::default()
        };
        let (rho, rho_t) = self.density(t);
        e.rho = rho;
        e.rho_t = rho_t;
        e.k_o = self.k_o();
        if self.config.physics.hydraulics {
            let pc = &self.disc.p_cells[l];
            e.p = pc.at_centroid(d);
            e.grad_p = pc.gradient(d);
            let (st, base) = self
                .retention(t, e.p)
                .map_err(|source| SolverError::Constitutive { cell: l, source })?;
            e.s = st.s;
            e.s_t = st.ds_dt;
            e.s_p = -st.ds_dpsi / PA_PER_MPA;
            let mob = match self.config.swrc.mobility {
                MobilityBasis::Uncorrected => base,
                MobilityBasis::Corrected => st,
            };
            let (kr, dkr) = vgm_relative(mob.s, m.vgm_m);
            let scale = m.k_s / WATER_UNIT_WEIGHT;
            e.k_w = scale * (m.kr_min + (1.0 - m.kr_min) * kr);
            let dk = scale * (1.0 - m.kr_min) * dkr;
            e.kw_t = dk * mob.ds_dt;
            e.kw_p = -dk * mob.ds_dpsi / PA_PER_MPA;
            if self.config.physics.relative_osmosis {
                let k_o = e.k_o;
                e.k_o = k_o * (m.kr_min + (1.0 - m.kr_min) * kr);
                e.ko_t = e.kw_t * k_o / scale;
                e.ko_p = e.kw_p * k_o / scale;
            }
        } else {
            e.s = self.s_fixed;
        }
        let (k_t, dk_t, c_v, dc_v) = tcf_vhcf_with_slopes(e.s, m);
        (e.k_t, e.dk_t) = match self.config.physics.conductivity {
            Some(k) => (k, 0.0),
            None => (k_t, dk_t),
        };
        (e.c_v, e.dc_v) = match self.config.physics.capacity {
            Some(c) => (c, 0.0),
            None => (c_v, dc_v),
        };
        Ok(e)
    }

    fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], &'x [f64]) {
        let np = self.disc.node_count();
        if self.config.physics.hydraulics {
            x.split_at(np)
        } else {
            (x, &[])
        }
    }

    fn history(&self, prev: &[f64]) -> Result<Vec<CellHistory>> {
        let (tau, d) = self.split(prev);
        (0..self.disc.t_cells.len())
            .into_par_iter()
            .map(|l| {
                let e = self.eval_cell(l, tau, d)?;
                Ok(CellHistory {
                    t: e.t,
                    rho_s: e.rho * e.s,
                })
            })
            .collect()
    }

    /// Step equations from `prev` over `dt` to time `t_new`.
    pub fn step_equations(&self, prev: &[f64], t_new: f64, dt: f64) -> Result<StepEquations<'_>> {
        Ok(StepEquations {
            problem: self,
            history: self.history(prev)?,
            dt: Some(dt),
            heater: self.config.boundary.heater.at(t_new),
            t_env: self.config.boundary.t_env.at(t_new),
        })
    }

    /// Writes the heater value into singular-kernel coefficients, which
    /// satisfies their constraint rows exactly.
    pub fn preset_constraints(&self, x: &mut [f64], t: f64) {
        if self.config.boundary.dirichlet == DirichletMethod::SingularKernel {
            let value = self.config.boundary.heater.at(t);
            for c in &self.disc.constraints {
                x[c.node] = value;
            }
        }
    }

    /// Steady equations (no storage terms) at time `t`.
    pub fn steady_equations(&self, t: f64) -> StepEquations<'_> {
        StepEquations {
            problem: self,
            history: Vec::new(),
            dt: None,
            heater: self.config.boundary.heater.at(t),
            t_env: self.config.boundary.t_env.at(t),
        }
    }

    /// Material state of every cell.
    pub fn cell_materials(&self, x: &[f64]) -> Result<Vec<CellMaterial>> {
        let (tau, d) = self.split(x);
        (0..self.disc.t_cells.len())
            .into_par_iter()
            .map(|l| {
                let e = self.eval_cell(l, tau, d)?;
                Ok(CellMaterial {
                    temperature: e.t,
                    pressure: e.p,
                    saturation: e.s,
                    mobility: e.k_w,
                    conductivity: e.k_t,
                    capacity: e.c_v,
                    density: e.rho,
                })
            })
            .collect()
    }

    /// `Σ_L 2π r_L W_L φ₀ S_L ρ_L`, kg.
    pub fn water_mass(&self, x: &[f64]) -> Result<f64> {
        let mats = self.cell_materials(x)?;
        let phi = self.config.material.porosity;
        Ok(mats
            .iter()
            .enumerate()
            .map(|(l, m)| self.disc.cell_weight(l) * phi * m.saturation * m.density)
            .sum())
    }

    pub fn state(&self, time: f64, x: &[f64]) -> Result<SimState> {
        let (tau, d) = self.split(x);
        Ok(SimState {
            time,
            temperature: tau.to_vec(),
            pressure: d.to_vec(),
            cells: self.cell_materials(x)?,
        })
    }

    pub fn pack(&self, state: &SimState) -> Vec<f64> {
        let mut x = state.temperature.clone();
        if self.config.physics.hydraulics {
            x.extend(&state.pressure);
        }
        x
    }

    /// Initial coefficients: uniform `T₀` and the pressure that gives `S₀`.
    pub fn initial_state(&self) -> Result<SimState> {
        let np = self.disc.node_count();
        let init = &self.config.initial;
        let mut x = vec![init.temperature; np];
        if self.config.physics.hydraulics {
            let p0 = match init.pressure {
                Some(p) => p,
                None => -initial_suction(self, init.temperature, init.saturation)? * PA_PER_MPA,
            };
            x.extend(std::iter::repeat_n(p0, np));
        }
        self.state(0.0, &x)
    }

    /// Temperature, pressure, suction and saturation at a point.
    pub fn probe(&self, x: &[f64], point: [f64; 2]) -> Result<Probe> {
        let (tau, d) = self.split(x);
        let t = self.disc.t_shapes(point)?.interpolate(tau);
        let (p, s) = if self.config.physics.hydraulics {
            let p = self.disc.p_shapes(point)?.interpolate(d);
            let s = self
                .saturation(t, p)
                .map_err(|source| SolverError::Constitutive { cell: usize::MAX, source })?
                .s;
            (p, s)
        } else {
            (0.0, self.s_fixed)
        };
        Ok(Probe {
            temperature: t,
            pressure: p,
            psi: -p / PA_PER_MPA,
            saturation: s,
        })
    }
}

/// Width of the suction cap relative to the cap itself.
const CAP_WIDTH: f64 = 0.05;

/// `f ln(1 + e^(x/f))` and its slope; the identity for `f = 0`.
fn soft_floor(x: f64, f: f64) -> (f64, f64) {
    if f <= 0.0 {
        return (x, 1.0);
    }
    let u = x / f;
    if u > 40.0 {
        return (x, 1.0);
    }
    let e = u.exp();
    // keep strictly positive when e^u underflows
    ((f * e.ln_1p()).max(f * 1e-300), e / (1.0 + e))
}

/// Suction (MPa) that gives saturation `s0` at `t0` under the active model.
fn initial_suction(problem: &CoupledProblem, t0: f64, s0: f64) -> Result<f64> {
    struct Corrected<'a>(&'a CoupledProblem);
    impl SaturationModel for Corrected<'_> {
        fn saturation(&self, t: f64, psi: f64) -> constitutive::Result<SaturationState> {
            self.0.saturation(t, -psi * PA_PER_MPA)
        }
    }
    solve_suction(&Corrected(problem), s0, t0, [0.01, 500.0])
        .map_err(|source| SolverError::Constitutive { cell: usize::MAX, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Probe {
    /// °C
    pub temperature: f64,
    /// Pa
    pub pressure: f64,
    /// MPa
    pub psi: f64,
    pub saturation: f64,
}

/// Local residual and row-major tangent of one element.
struct Local {
    res: Vec<f64>,
    tan: Vec<f64>,
}

impl StepEquations<'_> {
    fn cell_local(&self, l: usize, tau: &[f64], d: &[f64]) -> Result<Local> {
        let pb = self.problem;
        let disc = &pb.disc;
        let m = &pb.config.material;
        let phi = m.porosity;
        let w = disc.cell_weight(l);
        let e = pb.eval_cell(l, tau, d)?;
        let tc = &disc.t_cells[l];
        let nt = tc.nodes.len();
        let hydraulics = pb.config.physics.hydraulics;
        let pc = if hydraulics { Some(&disc.p_cells[l]) } else { None };
        let np = pc.map_or(0, |c| c.nodes.len());
        let n = nt + np;

        let g = pb.gravity();
        let k_o = e.k_o;
        let alpha = pb.alpha_s();
        let c_a = if pb.config.physics.advection { phi * m.c_water } else { 0.0 };
        let inv_dt = self.dt.map_or(0.0, |dt| 1.0 / dt);
        let (t_old, rho_s_old) = match self.history.get(l) {
            Some(h) => (h.t, h.rho_s),
            None => (e.t, e.rho * e.s),
        };
        let dtemp = e.t - t_old;

        // flux and its sensitivities
        let drive = [e.grad_p[0] - e.s * e.rho * g[0], e.grad_p[1] - e.s * e.rho * g[1]];
        let q = constitutive::darcy_flux(e.grad_p, e.grad_t, e.s, e.rho, e.k_w, k_o, g);
        let q_t: [f64; 2] = std::array::from_fn(|k| {
            -e.kw_t * drive[k] + e.k_w * g[k] * (e.s_t * e.rho + e.s * e.rho_t) - e.ko_t * e.grad_t[k]
        });
        let q_p: [f64; 2] =
            std::array::from_fn(|k| -e.kw_p * drive[k] + e.k_w * g[k] * e.rho * e.s_p - e.ko_p * e.grad_t[k]);

        // mass storage
        let mass = (phi * (e.rho * e.s - rho_s_old) - (1.0 - phi) * alpha * e.s * e.rho * dtemp) * inv_dt;
        let mass_t = (phi * (e.rho_t * e.s + e.rho * e.s_t)
            - (1.0 - phi) * alpha * ((e.s_t * e.rho + e.s * e.rho_t) * dtemp + e.s * e.rho))
            * inv_dt;
        let mass_p = (phi * e.rho * e.s_p - (1.0 - phi) * alpha * e.s_p * e.rho * dtemp) * inv_dt;
        let flux: [f64; 2] = std::array::from_fn(|k| e.rho * q[k]);
        let flux_t: [f64; 2] = std::array::from_fn(|k| e.rho_t * q[k] + e.rho * q_t[k]);
        let flux_p: [f64; 2] = std::array::from_fn(|k| e.rho * q_p[k]);

        // heat
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let q_grad = dot(q, e.grad_t);
        let heat = e.c_v * dtemp * inv_dt + c_a * e.s * q_grad;
        let heat_t = (e.dc_v * e.s_t * dtemp + e.c_v) * inv_dt + c_a * (e.s_t * q_grad + e.s * dot(q_t, e.grad_t));
        let heat_p = e.dc_v * e.s_p * dtemp * inv_dt + c_a * (e.s_p * q_grad + e.s * dot(q_p, e.grad_t));
        let heat_gt: [f64; 2] = std::array::from_fn(|k| c_a * e.s * (q[k] - k_o * e.grad_t[k]));
        let heat_gp: [f64; 2] = std::array::from_fn(|k| -c_a * e.s * e.k_w * e.grad_t[k]);
        let cond: [f64; 2] = std::array::from_fn(|k| e.k_t * e.grad_t[k]);
        let cond_t: [f64; 2] = std::array::from_fn(|k| e.dk_t * e.s_t * e.grad_t[k]);
        let cond_p: [f64; 2] = std::array::from_fn(|k| e.dk_t * e.s_p * e.grad_t[k]);

        let tt = &disc.t_test[l];
        let pt = pc.map(|_| &disc.p_test[l]);
        let mut res = vec![0.0; n];
        for a in 0..nt {
            let ga = [tt.grad_r[a], tt.grad_z[a]];
            res[a] = w * (tc.value[a] * heat + dot(ga, cond));
        }
        if let (Some(pc), Some(pt)) = (pc, pt) {
            for b in 0..np {
                let gb = [pt.grad_r[b], pt.grad_z[b]];
                res[nt + b] = w * (pc.value[b] * mass - dot(gb, flux));
            }
        }

        let mut tan = vec![0.0; n * n];
        for col in 0..n {
            // perturbations of (T, ∇T, p, ∇p) caused by this coefficient
            let (dt_v, dgt, dp_v, dgp) = if col < nt {
                (tc.value[col], [tc.grad_r[col], tc.grad_z[col]], 0.0, [0.0; 2])
            } else {
                let pc = pc.expect("pressure column");
                let b = col - nt;
                (0.0, [0.0; 2], pc.value[b], [pc.grad_r[b], pc.grad_z[b]])
            };
            let d_heat = heat_t * dt_v + heat_p * dp_v + dot(heat_gt, dgt) + dot(heat_gp, dgp);
            let d_cond: [f64; 2] = std::array::from_fn(|k| cond_t[k] * dt_v + cond_p[k] * dp_v + e.k_t * dgt[k]);
            for a in 0..nt {
                let ga = [tt.grad_r[a], tt.grad_z[a]];
                tan[a * n + col] = w * (tc.value[a] * d_heat + dot(ga, d_cond));
            }
            if let (Some(pc), Some(pt)) = (pc, pt) {
                let d_mass = mass_t * dt_v + mass_p * dp_v;
                let d_flux: [f64; 2] = std::array::from_fn(|k| {
                    flux_t[k] * dt_v + flux_p[k] * dp_v - e.rho * k_o * dgt[k] - e.rho * e.k_w * dgp[k]
                });
                for b in 0..np {
                    let gb = [pt.grad_r[b], pt.grad_z[b]];
                    tan[(nt + b) * n + col] = w * (pc.value[b] * d_mass - dot(gb, d_flux));
                }
            }
        }
        Ok(Local { res, tan })
    }

    fn boundary_local(&self, bp: &BoundaryPoint, tau: &[f64]) -> Local {
        let pb = self.problem;
        let nt = bp.t_nodes.len();
        let np = bp.p_nodes.len();
        let n = nt + np;
        let mut res = vec![0.0; n];
        let mut tan = vec![0.0; n * n];
        let t: f64 = bp.t_nodes.iter().zip(&bp.t_values).map(|(&i, v)| v * tau[i]).sum();
        if let Some(c) = pb.config.boundary.convection.get(bp.side) {
            for a in 0..nt {
                res[a] += bp.weight * bp.t_values[a] * c * (t - self.t_env);
                for col in 0..nt {
                    tan[a * n + col] += bp.weight * c * bp.t_values[a] * bp.t_values[col];
                }
            }
        }
        let qn = pb.config.boundary.water_flux.get(bp.side);
        if np > 0 && qn != 0.0 {
            let (rho, rho_t) = pb.density(t);
            for b in 0..np {
                res[nt + b] += bp.weight * bp.p_values[b] * rho * qn;
                for col in 0..nt {
                    tan[(nt + b) * n + col] += bp.weight * bp.p_values[b] * rho_t * qn * bp.t_values[col];
                }
            }
        }
        Local { res, tan }
    }
}

impl NonlinearSystem for StepEquations<'_> {
    fn len(&self) -> usize {
        self.problem.len()
    }

    fn linearize(&self, x: &[f64]) -> Result<LinearizedSystem> {
        let pb = self.problem;
        let (tau, d) = pb.split(x);
        let n = pb.len();
        let mut residual = vec![0.0; n];
        let mut values = vec![0.0; pb.pattern.nnz()];
        let np = pb.disc.node_count();
        let hydraulics = pb.config.physics.hydraulics;

        let dofs_of = |l: usize| -> Vec<usize> {
            let mut dofs = pb.disc.t_cells[l].nodes.clone();
            if hydraulics {
                dofs.extend(pb.disc.p_cells[l].nodes.iter().map(|&i| np + i));
            }
            dofs
        };
        let ncells = pb.disc.t_cells.len();
        const CHUNK: usize = 256;
        for start in (0..ncells).step_by(CHUNK) {
            let end = (start + CHUNK).min(ncells);
            let locals: Vec<Local> = (start..end)
                .into_par_iter()
                .map(|l| self.cell_local(l, tau, d))
                .collect::<Result<_>>()?;
            for (l, local) in (start..end).zip(locals) {
                scatter(&dofs_of(l), &local, &pb.pattern.cell_slots[l], &pb.constrained, &mut residual, &mut values);
            }
        }
        for (k, bp) in pb.disc.boundary.iter().enumerate() {
            let local = self.boundary_local(bp, tau);
            let mut dofs = bp.t_nodes.clone();
            dofs.extend(bp.p_nodes.iter().map(|&i| np + i));
            scatter(&dofs, &local, &pb.pattern.boundary_slots[k], &pb.constrained, &mut residual, &mut values);
        }
        for (c, slots) in pb.disc.constraints.iter().zip(&pb.pattern.constraint_slots) {
            let value: f64 = c.nodes.iter().zip(&c.coeffs).map(|(&i, v)| v * tau[i]).sum();
            residual[c.node] = value - self.heater;
            values[slots[0] as usize] = 0.0;
            for (k, coeff) in c.coeffs.iter().enumerate() {
                values[slots[k + 1] as usize] += coeff;
            }
        }
        let jacobian = SparseColMat::new(pb.pattern.symbolic.clone(), values);
        Ok(LinearizedSystem { residual, jacobian })
    }

    fn blocks(&self) -> Vec<(std::ops::Range<usize>, f64)> {
        let pb = self.problem;
        let np = pb.disc.node_count();
        let opts = &pb.config.time.newton;
        let mut out = vec![(0..np, opts.atol_heat)];
        if pb.config.physics.hydraulics {
            out.push((np..2 * np, opts.atol_mass));
        }
        out
    }

    fn is_constrained(&self, row: usize) -> bool {
        self.problem.constrained[row]
    }

    fn symbolic(&self) -> Option<&SymbolicLu<usize>> {
        Some(&self.problem.pattern.lu)
    }
}

fn scatter(dofs: &[usize], local: &Local, slots: &[u32], constrained: &[bool], residual: &mut [f64], values: &mut [f64]) {
    let n = dofs.len();
    for (a, &row) in dofs.iter().enumerate() {
        if constrained[row] {
            continue;
        }
        residual[row] += local.res[a];
        for b in 0..n {
            values[slots[a * n + b] as usize] += local.tan[a * n + b];
        }
    }
}

/// Outcome of one accepted time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub time: f64,
    pub dt: f64,
    pub newton: NewtonReport,
    /// Rejected attempts before this step was accepted.
    pub rejections: usize,
}

/// Advances `state` by one backward-Euler step, halving `dt` on failure.
///
/// Returns the new state, the report and the step size to try next.
pub fn step(problem: &CoupledProblem, state: &SimState, dt: f64) -> Result<(SimState, StepReport, f64)> {
    let tc = &problem.config.time;
    let prev = problem.pack(state);
    let mut dt = dt;
    let mut rejections = 0;
    loop {
        if dt < tc.dt_min {
            return Err(SolverError::StepUnderflow {
                time: state.time,
                dt_min: tc.dt_min,
            });
        }
        let t_new = state.time + dt;
        let mut x = prev.clone();
        let attempt = problem
            .step_equations(&prev, t_new, dt)
            .and_then(|eq| newton(&eq, &mut x, &tc.newton));
        match attempt {
            Ok(report) if report.converged => {
                let next = if report.iterations <= 4 {
                    (dt * tc.growth).min(tc.dt_max)
                } else {
                    dt
                };
                let new_state = problem.state(t_new, &x)?;
                return Ok((
                    new_state,
                    StepReport {
                        time: t_new,
                        dt,
                        newton: report,
                        rejections,
                    },
                    next,
                ));
            }
            Ok(report) => {
                log::debug!(
                    "step at t = {} s with dt = {dt} s rejected after {} iterations: {:?}",
                    state.time,
                    report.iterations,
                    report.residual_history
                );
                rejections += 1;
                dt *= 0.5;
            }
            Err(e @ SolverError::Constitutive { .. }) | Err(e @ SolverError::Factorization(_)) => {
                log::debug!("step at t = {} s with dt = {dt} s rejected: {e}", state.time);
                rejections += 1;
                dt *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Solves the steady equations from `state`.
pub fn solve_steady(problem: &CoupledProblem, state: &SimState) -> Result<(SimState, NewtonReport)> {
    let mut x = problem.pack(state);
    problem.preset_constraints(&mut x, state.time);
    let eq = problem.steady_equations(state.time);
    let report = newton(&eq, &mut x, &problem.config.time.newton)?;
    Ok((problem.state(state.time, &x)?, report))
}

/// One sensor reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub time_s: f64,
    pub sensor_id: usize,
    pub r_mm: f64,
    #[serde(rename = "T_C")]
    pub t_c: f64,
    #[serde(rename = "p_Pa")]
    pub p_pa: f64,
    #[serde(rename = "psi_MPa")]
    pub psi_mpa: f64,
    #[serde(rename = "S")]
    pub s: f64,
}

/// Reads every sensor position of the configuration.
pub fn probe_sensors(problem: &CoupledProblem, state: &SimState) -> Result<Vec<SensorRecord>> {
    let x = problem.pack(state);
    let g = &problem.config.geometry;
    problem
        .config
        .sensor_points()
        .into_iter()
        .enumerate()
        .map(|(id, pt)| {
            let inside = pt[0] >= g.r_i && pt[0] <= g.r_o && pt[1] >= 0.0 && pt[1] <= g.height;
            if !inside {
                return Err(SolverError::SensorOutsideDomain { id, r: pt[0], z: pt[1] });
            }
            let pr = problem.probe(&x, pt)?;
            Ok(SensorRecord {
                time_s: state.time,
                sensor_id: id,
                r_mm: pt[0] * 1e3,
                t_c: pr.temperature,
                p_pa: pr.pressure,
                psi_mpa: pr.psi,
                s: pr.saturation,
            })
        })
        .collect()
}

/// Full-field values at the nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub time: f64,
    /// `(node, r, z, T, p)` with fields evaluated at the node positions.
    pub rows: Vec<(usize, f64, f64, f64, f64)>,
}

pub fn snapshot(problem: &CoupledProblem, state: &SimState) -> Result<Snapshot> {
    let x = problem.pack(state);
    let coords = problem.disc.partition.node_coords();
    let rows = coords
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let pr = problem.probe(&x, *c)?;
            Ok((i, c[0], c[1], pr.temperature, pr.pressure))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Snapshot { time: state.time, rows })
}

/// Time series produced by [`run_heating_stage`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatingRun {
    pub sensors: Vec<SensorRecord>,
    pub snapshots: Vec<Snapshot>,
    pub steps: Vec<StepReport>,
    pub final_state: SimState,
}

impl HeatingRun {
    /// Readings of one sensor in time order.
    pub fn series(&self, sensor: usize) -> Vec<SensorRecord> {
        self.sensors.iter().filter(|r| r.sensor_id == sensor).copied().collect()
    }
}

/// Heats from the initial state to `t_end`, sampling sensors at the
/// configured interval. Steps are shortened to land on sampling times.
pub fn run_heating_stage(problem: &CoupledProblem) -> Result<HeatingRun> {
    run_heating_stage_with(problem, |_, _| {})
}

/// [`run_heating_stage`] with a callback after every accepted step.
pub fn run_heating_stage_with(
    problem: &CoupledProblem,
    mut on_step: impl FnMut(&SimState, &StepReport),
) -> Result<HeatingRun> {
    let cfg = &problem.config;
    let mut state = problem.initial_state()?;
    let mut sensors = probe_sensors(problem, &state)?;
    let mut snapshots = Vec::new();
    if cfg.output.snapshot_interval.is_some() {
        snapshots.push(snapshot(problem, &state)?);
    }
    let mut steps = Vec::new();
    let mut dt = cfg.time.dt_initial;
    let interval = cfg.output.sensor_interval;
    let mut next_sample = interval;
    let mut next_snapshot = cfg.output.snapshot_interval;
    let t_end = cfg.time.t_end;
    let eps = 1e-9 * t_end.max(1.0);
    while state.time < t_end - eps {
        let target = next_sample.min(t_end);
        let trial = dt.min(target - state.time);
        let (new_state, report, next_dt) = step(problem, &state, trial)?;
        // keep the unclipped step size for the following step
        dt = if trial < dt && report.rejections == 0 { dt } else { next_dt };
        state = new_state;
        on_step(&state, &report);
        steps.push(report);
        if state.time >= next_sample - eps {
            sensors.extend(probe_sensors(problem, &state)?);
            next_sample += interval;
        }
        if let Some(ns) = next_snapshot {
            if state.time >= ns - eps {
                snapshots.push(snapshot(problem, &state)?);
                next_snapshot = Some(ns + cfg.output.snapshot_interval.unwrap());
            }
        }
    }
    if sensors.last().is_none_or(|r| r.time_s < state.time) {
        sensors.extend(probe_sensors(problem, &state)?);
    }
    Ok(HeatingRun {
        sensors,
        snapshots,
        steps,
        final_state: state,
    })
}

pub fn write_sensor_csv(path: impl AsRef<Path>, records: &[SensorRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sensor_csv(path: impl AsRef<Path>) -> Result<Vec<SensorRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_snapshot_csv(path: impl AsRef<Path>, snap: &Snapshot) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "r_m", "z_m", "T_C", "p_Pa"])?;
    for (i, r, z, t, p) in &snap.rows {
        w.write_record([i.to_string(), r.to_string(), z.to_string(), t.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Saturation fixed at one value, for heat-only runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantSaturation(pub f64);

impl SaturationModel for ConstantSaturation {
    fn saturation(&self, _t: f64, _psi: f64) -> constitutive::Result<SaturationState> {
        Ok(SaturationState {
            s: self.0,
            ..Default::default()
        })
    }
}

/// Steady radial conduction problem with a closed-form solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatValidation {
    pub r_i: f64,
    pub r_o: f64,
    pub t_heater: f64,
    /// W/(m·K)
    pub k: f64,
    /// Outer convection coefficient, W/(m²·K).
    pub c: f64,
    pub t_env: f64,
    /// Radial spacing is `r_o / divisions`.
    pub divisions: usize,
    pub enriched: bool,
    pub dirichlet: DirichletMethod,
    /// Number of sample radii for the error norm.
    pub samples: usize,
}

impl Default for HeatValidation {
    fn default() -> Self {
        Self {
            r_i: 0.00625,
            r_o: 0.2773,
            t_heater: 200.0,
            k: 0.46,
            c: 2.008,
            t_env: 22.0,
            divisions: 100,
            enriched: true,
            dirichlet: DirichletMethod::SingularKernel,
            samples: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatValidationReport {
    pub spacing: f64,
    pub nodes: usize,
    pub enriched: bool,
    /// `‖T_h - T‖₂ / ‖T‖₂` over the sample radii.
    pub relative_l2: f64,
    pub max_abs_error: f64,
    pub newton_iterations: usize,
    /// `(r, T_h, T)` at the sample radii.
    pub profile: Vec<(f64, f64, f64)>,
}

impl HeatValidation {
    /// Thin slab of the annulus with insulated top and bottom.
    pub fn config(&self) -> SimConfig {
        let h = self.r_o / self.divisions as f64;
        let nr = ((self.r_o - self.r_i) / h).ceil() as usize + 1;
        SimConfig {
            geometry: Geometry {
                r_i: self.r_i,
                r_o: self.r_o,
                height: 2.0 * h,
            },
            grid: GridConfig {
                nr,
                nz: 3,
                grading: 1.0,
                enriched: self.enriched,
                ..Default::default()
            },
            boundary: BoundaryConfig {
                heater: Schedule::Constant(self.t_heater),
                dirichlet: self.dirichlet,
                convection: Walls {
                    inner: None,
                    outer: Some(self.c),
                    bottom: None,
                    top: None,
                },
                t_env: Schedule::Constant(self.t_env),
                ..Default::default()
            },
            initial: InitialConfig {
                temperature: self.t_env,
                ..Default::default()
            },
            physics: Physics::conduction(self.k, None),
            ..Default::default()
        }
    }

    pub fn run(&self) -> Result<HeatValidationReport> {
        let config = self.config();
        let spacing = self.r_o / self.divisions as f64;
        let z = 0.5 * config.geometry.height;
        let problem = CoupledProblem::new(config, Arc::new(ConstantSaturation(0.5)))?;
        let (state, report) = solve_steady(&problem, &problem.initial_state()?)?;
        if !report.converged {
            return Err(SolverError::Factorization("steady conduction did not converge".into()));
        }
        let exact = crate::reduced_bc::analytic_radial_t(self.r_i, self.r_o, self.t_heater, self.k, self.c, self.t_env)
            .map_err(|e| SolverError::Config(e.to_string()))?;
        let x = problem.pack(&state);
        let profile = (0..self.samples)
            .map(|i| {
                let r = self.r_i + (self.r_o - self.r_i) * i as f64 / (self.samples - 1) as f64;
                Ok((r, problem.probe(&x, [r, z])?.temperature, exact.temperature(r)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (num, den) = profile
            .iter()
            .fold((0.0, 0.0), |(n, d), (_, th, t)| (n + (th - t).powi(2), d + t * t));
        Ok(HeatValidationReport {
            spacing,
            nodes: problem.disc.node_count(),
            enriched: self.enriched,
            relative_l2: (num / den).sqrt(),
            max_abs_error: profile.iter().map(|(_, th, t)| (th - t).abs()).fold(0.0, f64::max),
            newton_iterations: report.iterations,
            profile,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::SyntheticRetention;

    fn small_config() -> SimConfig {
        SimConfig {
            geometry: Geometry {
                r_i: 0.00625,
                r_o: 0.08,
                height: 0.05,
            },
            grid: GridConfig {
                nr: 8,
                nz: 5,
                grading: 1.1,
                ..Default::default()
            },
            time: TimeConfig {
                dt_initial: 100.0,
                t_end: 1000.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn synthetic() -> Arc<dyn SaturationModel> {
        Arc::new(SyntheticRetention::default())
    }

    fn to_dense(m: &SparseColMat<usize, f64>) -> Vec<Vec<f64>> {
        let n = m.nrows();
        let mut out = vec![vec![0.0; n]; n];
        for t in m.triplet_iter() {
            out[t.row][t.col] += *t.val;
        }
        out
    }

    /// A smooth non-uniform state away from the heater temperature.
    fn perturbed(problem: &CoupledProblem) -> Vec<f64> {
        let coords = problem.disc.partition.node_coords();
        let np = coords.len();
        let mut x = vec![0.0; 2 * np];
        for (i, c) in coords.iter().enumerate() {
            x[i] = 40.0 + 300.0 * (0.08 - c[0]) + 50.0 * c[1];
            x[np + i] = -60e6 + 2e8 * c[0] * c[0] - 1e8 * c[1];
        }
        x
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let problem = CoupledProblem::new(small_config(), synthetic()).unwrap();
        let prev = problem.pack(&problem.initial_state().unwrap());
        let eq = problem.step_equations(&prev, 100.0, 100.0).unwrap();
        let x = perturbed(&problem);
        let lin = eq.linearize(&x).unwrap();
        let dense = to_dense(&lin.jacobian);
        let n = x.len();
        let np = n / 2;
        let mut fd = vec![vec![0.0; n]; n];
        for j in 0..n {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let rp = eq.linearize(&xp).unwrap().residual;
            let rm = eq.linearize(&xm).unwrap().residual;
            for i in 0..n {
                fd[i][j] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let blocks = [(0..np, 0..np), (0..np, np..n), (np..n, 0..np), (np..n, np..n)];
        for (rows, cols) in blocks {
            let (mut err, mut norm) = (0.0, 0.0);
            for i in rows.clone() {
                for j in cols.clone() {
                    err += (dense[i][j] - fd[i][j]).powi(2);
                    norm += fd[i][j].powi(2);
                }
            }
            let rel = (err / norm).sqrt();
            assert!(rel <= 1e-5, "block {rows:?} x {cols:?}: {rel:e}");
        }
    }

    #[test]
    fn tangent_entries_lie_in_pattern() {
        let problem = CoupledProblem::new(small_config(), synthetic()).unwrap();
        let x = perturbed(&problem);
        let eq = problem.steady_equations(0.0);
        let lin = eq.linearize(&x).unwrap();
        assert_eq!(lin.jacobian.compute_nnz(), problem.nnz());
        for t in lin.jacobian.triplet_iter() {
            assert!(problem.in_pattern(t.row, t.col));
        }
    }

    #[test]
    fn uniform_equilibrium_has_zero_residual() {
        let mut config = small_config();
        config.physics.gravity = false;
        config.boundary.heater = Schedule::Constant(22.0);
        let problem = CoupledProblem::new(config, synthetic()).unwrap();
        let x = problem.pack(&problem.initial_state().unwrap());
        let eq = problem.step_equations(&x, 100.0, 100.0).unwrap();
        let r = eq.linearize(&x).unwrap().residual;
        let max = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "{max:e}");
    }

    #[test]
    fn hydrostatic_state_is_steady() {
        let mut config = small_config();
        config.physics.density_variation = false;
        config.boundary.heater = Schedule::Constant(22.0);
        let problem = CoupledProblem::new(config, synthetic()).unwrap();
        let mut x = problem.pack(&problem.initial_state().unwrap());
        let state = solve_steady(&problem, &problem.state(0.0, &x).unwrap()).unwrap();
        assert!(state.1.converged);
        x = problem.pack(&state.0);
        // q = 0 everywhere: the pressure carries the weight of the water column
        for (l, c) in problem.disc.t_cells.iter().enumerate() {
            let q = constitutive::darcy_flux(
                problem.disc.p_cells[l].gradient(&x[x.len() / 2..]),
                c.gradient(&x[..x.len() / 2]),
                state.0.cells[l].saturation,
                state.0.cells[l].density,
                1.0,
                0.0,
                problem.config.material.gravity,
            );
            let weight = state.0.cells[l].saturation * state.0.cells[l].density * 9.81;
            assert!(q[0].hypot(q[1]) < 1e-5 * weight, "{q:?}");
        }
    }

    #[test]
    fn linear_problem_converges_in_one_iteration() {
        let mut config = small_config();
        config.physics = Physics::conduction(0.8, Some(2.5e6));
        let problem = CoupledProblem::new(config, Arc::new(ConstantSaturation(0.4))).unwrap();
        let state = problem.initial_state().unwrap();
        let (_, report, _) = step(&problem, &state, 100.0).unwrap();
        assert!(report.newton.converged);
        assert_eq!(report.newton.iterations, 1);
    }

    /// `a (T - T_env)` cooling of one lumped node.
    struct Lumped {
        prev: f64,
        dt: f64,
        a: f64,
        t_env: f64,
    }

    impl NonlinearSystem for Lumped {
        fn len(&self) -> usize {
            1
        }
        fn linearize(&self, x: &[f64]) -> Result<LinearizedSystem> {
            let r = (x[0] - self.prev) / self.dt + self.a * (x[0] - self.t_env);
            let j = 1.0 / self.dt + self.a;
            Ok(LinearizedSystem {
                residual: vec![r],
                jacobian: SparseColMat::try_new_from_triplets(1, 1, &[Triplet::new(0, 0, j)]).unwrap(),
            })
        }
        fn blocks(&self) -> Vec<(std::ops::Range<usize>, f64)> {
            vec![(0..1, 0.0)]
        }
    }

    #[test]
    fn lumped_cooling_matches_backward_euler() {
        let (a, t_env, dt) = (3e-3, 22.0, 50.0);
        let mut t = 200.0;
        for _ in 0..20 {
            let sys = Lumped { prev: t, dt, a, t_env };
            let mut x = vec![t];
            let rep = newton(&sys, &mut x, &NewtonOptions::default()).unwrap();
            assert!(rep.converged);
            let exact = (t + dt * a * t_env) / (1.0 + dt * a);
            assert!((x[0] - exact).abs() <= 1e-12 * exact);
            t = x[0];
        }
    }

    #[test]
    fn heater_nodes_read_back_prescribed_temperature() {
        for method in [DirichletMethod::SingularKernel, DirichletMethod::Collocation] {
            let mut config = small_config();
            config.boundary.dirichlet = method;
            let problem = CoupledProblem::new(config, synthetic()).unwrap();
            let state = problem.initial_state().unwrap();
            let (next, report, _) = step(&problem, &state, 100.0).unwrap();
            assert!(report.newton.converged);
            let x = problem.pack(&next);
            let coords = problem.disc.partition.node_coords();
            for &j in &problem.disc.partition.side_nodes(Side::Inner) {
                let t = problem.probe(&x, coords[j]).unwrap().temperature;
                assert!((t - 200.0).abs() < 1e-10, "{method:?}: {t}");
            }
        }
    }

    #[test]
    fn fully_constrained_solve_returns_prescribed_field() {
        let mut config = small_config();
        config.physics = Physics::conduction(0.8, Some(2.5e6));
        config.boundary.dirichlet = DirichletMethod::Collocation;
        let partition = build_rect_partition([0.00625, 0.08], [0.0, 0.05], 8, 5, Some(1.1)).unwrap();
        let all: Vec<usize> = (0..40).collect();
        let disc = Discretization::with_constraints(&config, partition, &all).unwrap();
        let problem = CoupledProblem::from_discretization(config, disc, Arc::new(ConstantSaturation(0.4))).unwrap();
        let (state, _, _) = step(&problem, &problem.initial_state().unwrap(), 100.0).unwrap();
        for c in problem.disc.partition.node_coords() {
            let t = problem.probe(&state.temperature, c).unwrap().temperature;
            assert!((t - 200.0).abs() < 1e-10);
        }
    }

    #[test]
    fn missing_constraints_are_rejected() {
        let config = small_config();
        let partition = build_rect_partition([0.00625, 0.08], [0.0, 0.05], 8, 5, None).unwrap();
        assert!(matches!(
            Discretization::with_constraints(&config, partition, &[]),
            Err(SolverError::NoConstraints)
        ));
    }

    #[test]
    fn steady_conduction_matches_closed_form() {
        let coarse = HeatValidation {
            divisions: 50,
            ..Default::default()
        }
        .run()
        .unwrap();
        assert!(coarse.relative_l2 < 1e-4, "{}", coarse.relative_l2);
        assert_eq!(coarse.newton_iterations, 1);
        for (_, th, _) in &coarse.profile {
            assert!(*th <= 200.0 + 1e-9 && *th >= 22.0);
        }
        let plain = |divisions| {
            HeatValidation {
                divisions,
                enriched: false,
                ..Default::default()
            }
            .run()
            .unwrap()
            .relative_l2
        };
        let (e1, e2) = (plain(50), plain(100));
        assert!(e2 < 0.5 * e1, "{e1:e} -> {e2:e}");
    }

    #[test]
    fn transient_conduction_is_bounded_and_monotone() {
        let mut config = small_config();
        config.physics = Physics::conduction(0.8, Some(2.5e6));
        let problem = CoupledProblem::new(config, Arc::new(ConstantSaturation(0.4))).unwrap();
        let mut state = problem.initial_state().unwrap();
        let probe = [0.03, 0.025];
        let mut last = problem.probe(&state.temperature, probe).unwrap().temperature;
        for _ in 0..10 {
            state = step(&problem, &state, 600.0).unwrap().0;
            let t = problem.probe(&state.temperature, probe).unwrap().temperature;
            assert!(t >= last - 1e-9 && t <= 200.0);
            last = t;
        }
        assert!(last > 23.0);
    }

    #[test]
    fn water_mass_is_conserved_with_frozen_coefficients() {
        let mut config = small_config();
        config.physics.thermal_expansion = false;
        config.physics.density_variation = false;
        config.time.newton.rtol = 1e-12;
        let problem = CoupledProblem::new(config, synthetic()).unwrap();
        let mut state = problem.initial_state().unwrap();
        let m0 = problem.water_mass(&problem.pack(&state)).unwrap();
        let mut dt = 50.0;
        for _ in 0..20 {
            let out = step(&problem, &state, dt).unwrap();
            state = out.0;
            dt = out.2.min(400.0);
        }
        let m1 = problem.water_mass(&problem.pack(&state)).unwrap();
        assert!(((m1 - m0) / m0).abs() < 1e-10, "{m0} -> {m1}");
    }

    #[test]
    fn schedule_interpolates_and_clamps() {
        let s = Schedule::Table(vec![(0.0, 22.0), (100.0, 122.0)]);
        assert_eq!(s.at(-5.0), 22.0);
        assert_eq!(s.at(50.0), 72.0);
        assert_eq!(s.at(1e6), 122.0);
        assert!(Schedule::Table(vec![(1.0, 0.0), (0.0, 1.0)]).validate("x").is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = SimConfig::default();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, back);
        let partial: SimConfig = serde_json::from_str(r#"{"grid": {"nr": 10}}"#).unwrap();
        assert_eq!(partial.grid.nr, 10);
        assert_eq!(partial.grid.nz, 32);
    }

    #[test]
    fn sensors_sit_at_heater_offsets() {
        let config = SimConfig::default();
        let pts = config.sensor_points();
        let r_mm: Vec<f64> = pts.iter().map(|p| (p[0] * 1e3 * 100.0).round() / 100.0).collect();
        assert_eq!(r_mm, vec![6.25, 56.25, 76.25, 106.25, 131.25, 191.25]);
    }
}
