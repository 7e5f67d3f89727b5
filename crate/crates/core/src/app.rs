//! Command implementations behind the `rkthm` binary.
//!
//! Every command reads an optional JSON config, writes its results plus the
//! resolved `config.json` and a `manifest.json` into the output directory, and
//! reports failures as an [`AppError`] that maps onto a process exit code.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constitutive::{
    fit_lu, lu_swrc, read_fit_csv, read_retention_csv, write_fit_csv, write_retention_csv, ConstitutiveError,
    FitOptions, FittedLuTable, LuSwrcParams, RetentionPoint, SaturationModel, SyntheticRetention,
};
use crate::rk::{BasisSpec, RkError, DEFAULT_SUPPORT_FACTOR};
use crate::scni::{build_rect_partition, patch_test, PatchTestReport, ScniError};
use crate::solver::{
    read_sensor_csv, run_heating_stage_with, write_sensor_csv, write_snapshot_csv, CoupledProblem, HeatValidation,
    SimConfig, SolverError, SwrcSource,
};
use crate::swrc_dnn::{
    build_reproduction, curve_rmse, rmse, train, DnnError, MlpModel, ReproductionSpec, TrainParams, TrainingSet,
};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "RKTHM_THREADS";

#[derive(Debug, Error)]
pub enum AppError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Config(_) => 2,
            AppError::Numerical(_) => 3,
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<ConstitutiveError> for AppError {
    fn from(e: ConstitutiveError) -> Self {
        use ConstitutiveError::*;
        match e {
            NotConverged { .. } | NoRoot { .. } | Model(_) => AppError::Numerical(e.to_string()),
            _ => AppError::Config(e.to_string()),
        }
    }
}

impl From<DnnError> for AppError {
    fn from(e: DnnError) -> Self {
        match e {
            DnnError::Diverged { .. } | DnnError::ZeroReference => AppError::Numerical(e.to_string()),
            DnnError::Constitutive(c) => c.into(),
            _ => AppError::Config(e.to_string()),
        }
    }
}

impl From<RkError> for AppError {
    fn from(e: RkError) -> Self {
        match e {
            RkError::InvalidCloud(_) => AppError::Config(e.to_string()),
            _ => AppError::Numerical(e.to_string()),
        }
    }
}

impl From<ScniError> for AppError {
    fn from(e: ScniError) -> Self {
        match e {
            ScniError::Degenerate(_) => AppError::Config(e.to_string()),
            ScniError::Shapes { source, .. } => source.into(),
            _ => AppError::Numerical(e.to_string()),
        }
    }
}

impl From<SolverError> for AppError {
    fn from(e: SolverError) -> Self {
        use SolverError::*;
        match e {
            Constitutive { .. } | Factorization(_) | StepUnderflow { .. } => AppError::Numerical(e.to_string()),
            Rk(r) => r.into(),
            Scni(s) => s.into(),
            _ => AppError::Config(e.to_string()),
        }
    }
}

/// Sizes the global rayon pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| AppError::Config(format!("{THREADS_ENV}={raw:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| AppError::Config(e.to_string()))
}

/// Flags shared by all commands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub model: Option<PathBuf>,
}

/// Record of what produced an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub out_dir: PathBuf,
    pub version: String,
    /// SHA-256 of the resolved config as written to `config.json`.
    pub config_hash: String,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.as_ref().join(Self::FILE))?)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn finish<T: Serialize>(command: &str, opts: &RunOptions, config: &T, seeds: BTreeMap<String, u64>) -> Result<RunManifest> {
    let text = serde_json::to_string_pretty(config)?;
    std::fs::write(opts.out.join("config.json"), &text)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: opts.config.clone(),
        model_path: opts.model.clone(),
        seeds,
        out_dir: opts.out.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: sha256_hex(text.as_bytes()),
    };
    std::fs::write(opts.out.join(RunManifest::FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

// ---------------------------------------------------------------- validate-heat

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateHeatConfig {
    pub case: HeatValidation,
    /// Values of `R/h`.
    pub divisions: Vec<usize>,
    /// Required relative L2 error of the enriched run at the coarsest spacing.
    pub tolerance: f64,
}

impl Default for ValidateHeatConfig {
    fn default() -> Self {
        Self {
            case: HeatValidation::default(),
            divisions: vec![100, 200, 400, 800],
            tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatErrorRow {
    pub divisions: usize,
    pub spacing_m: f64,
    pub enriched: bool,
    pub nodes: usize,
    pub relative_l2: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidateHeatSummary {
    pub rows: Vec<HeatErrorRow>,
    pub coarse_enriched: f64,
    pub fine_plain: f64,
    pub monotone_enriched: bool,
    pub monotone_plain: bool,
    pub passed: bool,
}

/// Enriched and plain steady conduction at each spacing against the closed form.
///
/// Fails validation unless the enriched error at the coarsest spacing is
/// within `tolerance` and below the plain error at the finest spacing.
pub fn cmd_validate_heat(opts: &RunOptions) -> Result<ValidateHeatSummary> {
    let cfg: ValidateHeatConfig = load_config(opts.config.as_deref())?;
    if cfg.divisions.is_empty() {
        return Err(AppError::Config("no divisions given".into()));
    }
    std::fs::create_dir_all(&opts.out)?;
    let mut divisions = cfg.divisions.clone();
    divisions.sort_unstable();
    let mut rows = Vec::new();
    for enriched in [true, false] {
        for &d in &divisions {
            let rep = HeatValidation {
                divisions: d,
                enriched,
                ..cfg.case
            }
            .run()?;
            log::info!("R/h = {d}, enriched = {enriched}: relative L2 {:.4e}", rep.relative_l2);
            let name = format!("profile_{}_{d}.csv", if enriched { "enriched" } else { "plain" });
            let mut w = csv::Writer::from_path(opts.out.join(name))?;
            w.write_record(["r_m", "T_numeric_C", "T_analytic_C"])?;
            for (r, th, t) in &rep.profile {
                w.write_record([r.to_string(), th.to_string(), t.to_string()])?;
            }
            w.flush()?;
            rows.push(HeatErrorRow {
                divisions: d,
                spacing_m: rep.spacing,
                enriched,
                nodes: rep.nodes,
                relative_l2: rep.relative_l2,
                max_abs_error: rep.max_abs_error,
            });
        }
    }
    let mut w = csv::Writer::from_path(opts.out.join("errors.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let monotone = |enriched: bool| {
        let errs: Vec<f64> = rows.iter().filter(|r| r.enriched == enriched).map(|r| r.relative_l2).collect();
        errs.windows(2).all(|w| w[1] <= w[0])
    };
    let coarse_enriched = rows.iter().find(|r| r.enriched).map(|r| r.relative_l2).unwrap();
    let fine_plain = rows.iter().rev().find(|r| !r.enriched).map(|r| r.relative_l2).unwrap();
    let summary = ValidateHeatSummary {
        passed: coarse_enriched <= cfg.tolerance && coarse_enriched < fine_plain,
        monotone_enriched: monotone(true),
        monotone_plain: monotone(false),
        coarse_enriched,
        fine_plain,
        rows,
    };
    write_json(opts.out.join("summary.json"), &summary)?;
    finish("validate-heat", opts, &cfg, BTreeMap::new())?;
    if !summary.passed {
        return Err(AppError::Validation(format!(
            "enriched error {coarse_enriched:.3e} at R/h = {} vs plain {fine_plain:.3e} at R/h = {}",
            divisions[0],
            divisions[divisions.len() - 1]
        )));
    }
    Ok(summary)
}

// ---------------------------------------------------------------- patch-test

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchTestConfig {
    pub r_range: [f64; 2],
    pub z_range: [f64; 2],
    pub nr: usize,
    pub nz: usize,
    /// Ratio of consecutive radial spacings.
    pub grading: Option<f64>,
    pub support_factor: f64,
    pub tolerance: f64,
}

impl Default for PatchTestConfig {
    fn default() -> Self {
        Self {
            r_range: [0.1, 1.1],
            z_range: [0.0, 1.0],
            nr: 6,
            nz: 6,
            grading: None,
            support_factor: DEFAULT_SUPPORT_FACTOR,
            tolerance: 1e-10,
        }
    }
}

/// Linear patch test of both smoothing forms; passes when the axisymmetric
/// form is exact to `tolerance`.
pub fn cmd_patch_test(opts: &RunOptions) -> Result<PatchTestReport> {
    let cfg: PatchTestConfig = load_config(opts.config.as_deref())?;
    std::fs::create_dir_all(&opts.out)?;
    let partition = build_rect_partition(cfg.r_range, cfg.z_range, cfg.nr, cfg.nz, cfg.grading)?;
    let cloud = partition.cloud(cfg.support_factor)?;
    let report = patch_test(&partition, &cloud, BasisSpec::LINEAR)?;
    write_json(opts.out.join("report.json"), &report)?;
    finish("patch-test", opts, &cfg, BTreeMap::new())?;
    let err = report.axisymmetric.max_error();
    if !(err <= cfg.tolerance) {
        return Err(AppError::Validation(format!("axisymmetric strain error {err:.3e} > {:.1e}", cfg.tolerance)));
    }
    Ok(report)
}

// ---------------------------------------------------------------- fit-swrc

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSwrcConfig {
    /// Retention CSV with `T_C`, `psi_MPa` and `S` columns. When absent the
    /// synthetic reference family is sampled instead.
    pub data: Option<PathBuf>,
    /// Temperatures to fit. When empty: every temperature in the data, or the
    /// reproduction temperatures for the synthetic family.
    pub temperatures: Vec<f64>,
    pub theta_s: f64,
    pub fit: FitOptions,
    pub synthetic: SyntheticRetention,
    /// Saturation levels sampled from the synthetic family.
    pub levels: Vec<f64>,
}

impl Default for FitSwrcConfig {
    fn default() -> Self {
        let rep = ReproductionSpec::default();
        Self {
            data: None,
            temperatures: Vec::new(),
            theta_s: 0.42,
            fit: FitOptions::default(),
            synthetic: rep.family,
            levels: rep.levels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub temperature: f64,
    /// Largest relative error over the five free parameters.
    pub max_relative_error: f64,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSwrcOutcome {
    pub fits: Vec<(f64, crate::constitutive::LuFit)>,
    /// Present when fitting the synthetic family, whose parameters are known.
    pub recovery: Option<Vec<RecoveryRow>>,
}

fn distinct_temperatures(points: &[RetentionPoint]) -> Vec<f64> {
    let mut ts: Vec<f64> = points.iter().map(|p| p.temperature).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    ts
}

fn free_params(p: &LuSwrcParams) -> [f64; 5] {
    [p.theta_a_max, p.psi_max, p.psi_c, p.alpha, p.n]
}

/// Fits one Lu curve per temperature and writes `fits.csv`.
pub fn cmd_fit_swrc(opts: &RunOptions) -> Result<FitSwrcOutcome> {
    let mut cfg: FitSwrcConfig = load_config(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.fit.seed = seed;
    }
    std::fs::create_dir_all(&opts.out)?;
    let points = match &cfg.data {
        Some(path) => read_retention_csv(path)?,
        None => {
            let temps = match cfg.temperatures.is_empty() {
                true => ReproductionSpec::default().fit_temperatures,
                false => cfg.temperatures.clone(),
            };
            let pts = cfg.synthetic.measurements(&temps, &cfg.levels)?;
            write_retention_csv(opts.out.join("measurements.csv"), &pts)?;
            pts
        }
    };
    let temps = match cfg.temperatures.is_empty() {
        true => distinct_temperatures(&points),
        false => cfg.temperatures.clone(),
    };
    let mut fits = Vec::with_capacity(temps.len());
    for &t in &temps {
        let samples: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| (p.temperature - t).abs() < 1e-9)
            .map(|p| (p.psi, p.saturation))
            .collect();
        let fit = fit_lu(&samples, cfg.theta_s, &cfg.fit)?;
        log::info!("T = {t} °C: residual {:.3e} after {} iterations", fit.residual_norm, fit.iterations);
        fits.push((t, fit));
    }
    write_fit_csv(opts.out.join("fits.csv"), &fits)?;

    let recovery = cfg.data.is_none().then(|| {
        fits.iter()
            .map(|(t, f)| {
                let truth = free_params(&cfg.synthetic.params_at(*t));
                let got = free_params(&f.params);
                RecoveryRow {
                    temperature: *t,
                    max_relative_error: truth.iter().zip(&got).map(|(a, b)| ((b - a) / a).abs()).fold(0.0, f64::max),
                    residual_norm: f.residual_norm,
                }
            })
            .collect::<Vec<_>>()
    });
    if let Some(rows) = &recovery {
        let mut w = csv::Writer::from_path(opts.out.join("recovery.csv"))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    finish("fit-swrc", opts, &cfg, BTreeMap::from([("fit".to_string(), cfg.fit.seed)]))?;
    Ok(FitSwrcOutcome { fits, recovery })
}

// ---------------------------------------------------------------- train-dnn

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainDnnConfig {
    /// Training CSV (`T_C, psi_MPa, S, provenance`). When absent the dataset
    /// is built from the synthetic reproduction study.
    pub dataset: Option<PathBuf>,
    pub reproduction: ReproductionSpec,
    pub train: TrainParams,
    /// Largest acceptable train or test relative error.
    pub max_relative_error: Option<f64>,
}

impl Default for TrainDnnConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            reproduction: ReproductionSpec::default(),
            train: TrainParams::default(),
            max_relative_error: Some(0.02),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveComparison {
    pub temperature: f64,
    /// Fitted curve against the measured points at this temperature.
    pub rmse_fit_vs_data: f64,
    /// Network against the measured points at this temperature.
    pub rmse_dnn_vs_data: f64,
    /// Network against the fitted curve on the sampling grid.
    pub rmse_dnn_vs_fit: f64,
    /// Network against the generating curve, when known.
    pub rmse_dnn_vs_truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub points: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub train_relative_error: f64,
    pub test_relative_error: f64,
    pub comparison: Vec<CurveComparison>,
}

/// Per-temperature RMSE table of fitted curves and network.
pub fn compare_curves(
    model: &MlpModel,
    fits: &[(f64, LuSwrcParams)],
    data: &[RetentionPoint],
    truth: Option<&SyntheticRetention>,
    grid: &crate::swrc_dnn::PsiGrid,
) -> Result<Vec<CurveComparison>> {
    fits.iter()
        .map(|(t, p)| {
            let pts: Vec<&RetentionPoint> = data.iter().filter(|d| (d.temperature - t).abs() < 1e-9).collect();
            let s: Vec<f64> = pts.iter().map(|d| d.saturation).collect();
            let fitted: Vec<f64> = pts.iter().map(|d| lu_swrc(d.psi, p)).collect::<Result<_, _>>()?;
            let net: Vec<f64> = pts.iter().map(|d| model.forward(d.temperature, d.psi)).collect::<Result<_, _>>()?;
            let on_data = |pred: &[f64]| if s.is_empty() { Ok(f64::NAN) } else { rmse(&s, pred) };
            Ok(CurveComparison {
                temperature: *t,
                rmse_fit_vs_data: on_data(&fitted)?,
                rmse_dnn_vs_data: on_data(&net)?,
                rmse_dnn_vs_fit: curve_rmse(model, p, *t, grid)?,
                rmse_dnn_vs_truth: truth.map(|f| curve_rmse(model, &f.params_at(*t), *t, grid)).transpose()?,
            })
        })
        .collect()
}

fn write_comparison(path: impl AsRef<Path>, rows: &[CurveComparison]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T_C", "rmse_fit_vs_data", "rmse_dnn_vs_data", "rmse_dnn_vs_fit", "rmse_dnn_vs_truth"])?;
    for r in rows {
        w.write_record([
            r.temperature.to_string(),
            r.rmse_fit_vs_data.to_string(),
            r.rmse_dnn_vs_data.to_string(),
            r.rmse_dnn_vs_fit.to_string(),
            r.rmse_dnn_vs_truth.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the retention network and writes `model.json`, `metrics.json`,
/// `history.csv` and, for the reproduction study, `comparison.csv`.
pub fn cmd_train_dnn(opts: &RunOptions) -> Result<TrainMetrics> {
    let mut cfg: TrainDnnConfig = load_config(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.train.init_seed = seed;
    }
    std::fs::create_dir_all(&opts.out)?;
    let (dataset, study) = match &cfg.dataset {
        Some(path) => (TrainingSet::read_csv(path)?, None),
        None => {
            let rep = build_reproduction(&cfg.reproduction)?;
            rep.dataset.write_csv(opts.out.join("dataset.csv"))?;
            write_fit_csv(opts.out.join("fits.csv"), &rep.fits)?;
            (rep.dataset.clone(), Some(rep))
        }
    };
    let out = train(&dataset, &cfg.train)?;
    out.model.save(opts.out.join("model.json"))?;

    let mut w = csv::Writer::from_path(opts.out.join("history.csv"))?;
    w.write_record(["epoch", "train_loss", "test_loss"])?;
    for (k, h) in out.history.iter().enumerate() {
        w.write_record([(k + 1).to_string(), h.train.to_string(), h.test.to_string()])?;
    }
    w.flush()?;

    let comparison = match &study {
        Some(rep) => {
            let rows = compare_curves(
                &out.model,
                &rep.fit_params(),
                &rep.measurements,
                Some(&cfg.reproduction.family),
                &cfg.reproduction.grid,
            )?;
            write_comparison(opts.out.join("comparison.csv"), &rows)?;
            rows
        }
        None => Vec::new(),
    };
    let last = out.history.last().copied().ok_or(AppError::Config("zero epochs".into()))?;
    let metrics = TrainMetrics {
        points: dataset.len(),
        epochs: out.history.len(),
        best_epoch: out.best_epoch,
        final_train_loss: last.train,
        final_test_loss: last.test,
        train_relative_error: out.train_relative_error,
        test_relative_error: out.test_relative_error,
        comparison,
    };
    write_json(opts.out.join("metrics.json"), &metrics)?;
    let seeds = BTreeMap::from([
        ("init".to_string(), cfg.train.init_seed),
        ("split".to_string(), cfg.train.split_seed),
        ("noise".to_string(), cfg.reproduction.noise_seed),
        ("fit".to_string(), cfg.reproduction.fit.seed),
    ]);
    finish("train-dnn", opts, &cfg, seeds)?;
    if let Some(limit) = cfg.max_relative_error {
        let worst = metrics.train_relative_error.max(metrics.test_relative_error);
        if !(worst <= limit) {
            return Err(AppError::Validation(format!("relative error {worst:.4} exceeds {limit}")));
        }
    }
    Ok(metrics)
}

// ---------------------------------------------------------------- simulate-tank

/// Retention model selected by `--model` or the config's `swrc.source`.
pub fn resolve_model(cfg: &SimConfig, model: Option<&Path>) -> Result<Arc<dyn SaturationModel>> {
    if let Some(path) = model {
        return Ok(Arc::new(MlpModel::load(path)?));
    }
    match &cfg.swrc.source {
        SwrcSource::Dnn { model: Some(path) } => Ok(Arc::new(MlpModel::load(path)?)),
        SwrcSource::Dnn { model: None } => Err(AppError::Config(
            "the DNN retention source needs a model file (--model or swrc.source.model)".into(),
        )),
        SwrcSource::FittedLu { fits } => Ok(Arc::new(FittedLuTable::new(read_fit_csv(fits)?)?)),
        SwrcSource::Synthetic => Ok(Arc::new(SyntheticRetention::default())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TankSummary {
    pub nodes: usize,
    pub steps: usize,
    pub rejected_steps: usize,
    pub newton_iterations: usize,
    pub final_time_s: f64,
    pub wall_time_s: f64,
}

/// Runs the heating stage and writes `sensors.csv`, `steps.csv`, field
/// snapshots and `summary.json`.
pub fn cmd_simulate_tank(opts: &RunOptions) -> Result<TankSummary> {
    let mut cfg: SimConfig = load_config(opts.config.as_deref())?;
    let model = resolve_model(&cfg, opts.model.as_deref())?;
    if let Some(path) = &opts.model {
        cfg.swrc.source = SwrcSource::Dnn { model: Some(path.clone()) };
    }
    std::fs::create_dir_all(&opts.out)?;
    let problem = CoupledProblem::new(cfg.clone(), model)?;
    log::info!("{} nodes, {} unknowns", problem.disc.node_count(), problem.len());
    let started = std::time::Instant::now();
    let run = run_heating_stage_with(&problem, |state, report| {
        log::debug!(
            "t = {:.1} s, dt = {:.1} s, {} Newton iterations",
            state.time,
            report.dt,
            report.newton.iterations
        );
    })?;
    write_sensor_csv(opts.out.join("sensors.csv"), &run.sensors)?;
    let mut w = csv::Writer::from_path(opts.out.join("steps.csv"))?;
    w.write_record(["time_s", "dt_s", "newton_iterations", "rejections"])?;
    for s in &run.steps {
        w.write_record([s.time.to_string(), s.dt.to_string(), s.newton.iterations.to_string(), s.rejections.to_string()])?;
    }
    w.flush()?;
    for (k, snap) in run.snapshots.iter().enumerate() {
        write_snapshot_csv(opts.out.join(format!("snapshot_{k:04}.csv")), snap)?;
    }
    let summary = TankSummary {
        nodes: problem.disc.node_count(),
        steps: run.steps.len(),
        rejected_steps: run.steps.iter().map(|s| s.rejections).sum(),
        newton_iterations: run.steps.iter().map(|s| s.newton.iterations).sum(),
        final_time_s: run.final_state.time,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(opts.out.join("summary.json"), &summary)?;
    // the sensor file must stay readable by the importer
    read_sensor_csv(opts.out.join("sensors.csv"))?;
    finish("simulate-tank", opts, &cfg, BTreeMap::new())?;
    Ok(summary)
}

// ---------------------------------------------------------------- compare-swrc

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSwrcConfig {
    /// Fitted curves from `fit-swrc`; refitted from the data when absent.
    pub fits: Option<PathBuf>,
    /// Retention measurements; sampled from the synthetic family when absent.
    pub data: Option<PathBuf>,
    pub reproduction: ReproductionSpec,
}

impl Default for CompareSwrcConfig {
    fn default() -> Self {
        Self {
            fits: None,
            data: None,
            reproduction: ReproductionSpec::default(),
        }
    }
}

/// RMSE table of fitted curves and a trained network per temperature.
pub fn cmd_compare_swrc(opts: &RunOptions) -> Result<Vec<CurveComparison>> {
    let cfg: CompareSwrcConfig = load_config(opts.config.as_deref())?;
    let path = opts
        .model
        .as_deref()
        .ok_or_else(|| AppError::Config("compare-swrc needs --model".into()))?;
    let model = MlpModel::load(path)?;
    std::fs::create_dir_all(&opts.out)?;
    let rep = &cfg.reproduction;
    let synthetic = cfg.data.is_none();
    let data = match &cfg.data {
        Some(p) => read_retention_csv(p)?,
        None => {
            let mut temps = rep.fit_temperatures.clone();
            temps.extend(&rep.extra_temperatures);
            rep.family.measurements(&temps, &rep.levels)?
        }
    };
    let fits = match &cfg.fits {
        Some(p) => read_fit_csv(p)?,
        None => {
            let temps = if synthetic { rep.fit_temperatures.clone() } else { distinct_temperatures(&data) };
            crate::swrc_dnn::fit_by_temperature(&data, &temps, rep.family.theta_s, &rep.fit)?
                .into_iter()
                .map(|(t, f)| (t, f.params))
                .collect()
        }
    };
    let rows = compare_curves(&model, &fits, &data, synthetic.then_some(&rep.family), &rep.grid)?;
    write_comparison(opts.out.join("comparison.csv"), &rows)?;
    finish("compare-swrc", opts, &cfg, BTreeMap::from([("fit".to_string(), rep.fit.seed)]))?;
    Ok(rows)
}
