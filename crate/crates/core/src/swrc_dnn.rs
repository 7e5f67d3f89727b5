//! Neural-network retention model `S(T, ψ)`.
//!
//! A fully connected network with tanh hidden layers and a linear output is
//! trained on samples of fitted Lu curves plus measured points. Inputs and
//! output are standardized with statistics of the training split. The loss is
//! the squared misfit on the standardized scale plus a ReLU penalty on
//! physical saturations above one and an L2 penalty on the weights.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{
    lu_swrc, ConstitutiveError, FitOptions, LuFit, LuSwrcParams, RetentionPoint, SaturationModel, SaturationState,
    SyntheticRetention,
};

pub const MODEL_FORMAT: &str = "rkthm-mlp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DnnError {
    #[error("layer shapes do not chain: {0}")]
    Shape(String),
    #[error("standard deviation of {0} is not positive")]
    DegenerateChannel(&'static str),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reference vector has zero norm")]
    ZeroReference,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("no fitted curve at {0} °C")]
    MissingFit(f64),
    #[error("model file: {0}")]
    Format(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Constitutive(#[from] ConstitutiveError),
}

pub type Result<T, E = DnnError> = std::result::Result<T, E>;

/// Affine map to zero mean and unit deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer { mean: 0.0, std: 1.0 };

    /// Mean and population standard deviation of `values`.
    pub fn fit(values: impl IntoIterator<Item = f64> + Clone, name: &'static str) -> Result<Self> {
        let n = values.clone().into_iter().count();
        if n == 0 {
            return Err(DnnError::Empty);
        }
        let mean = values.clone().into_iter().sum::<f64>() / n as f64;
        let var = values.into_iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(DnnError::DegenerateChannel(name));
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn destandardize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// One dense layer `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// Axis-aligned box of the training inputs, used for extrapolation warnings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub t: [f64; 2],
    pub psi: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    /// Standardizers of `T` and `ψ`.
    pub input: [Standardizer; 2],
    pub output: Standardizer,
    pub domain: Option<InputBox>,
}

static OUT_OF_RANGE_WARNED: AtomicBool = AtomicBool::new(false);

impl MlpModel {
    /// Default architecture: two inputs, two hidden layers of 100, one output.
    pub const DIMS: [usize; 4] = [2, 100, 100, 1];

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims[0] != 2 || *dims.last().unwrap() != 1 {
            return Err(DnnError::Shape(format!("{dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                w: Array2::zeros((w[1], w[0])),
                b: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            layers,
            input: [Standardizer::IDENTITY; 2],
            output: Standardizer::IDENTITY,
            domain: None,
        })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn glorot(dims: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let (out, inp) = layer.w.dim();
            let limit = (6.0 / (inp + out) as f64).sqrt();
            layer.w.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(model)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].w.ncols()];
        d.extend(self.layers.iter().map(|l| l.w.nrows()));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DnnError::Shape("no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].w.nrows() != pair[1].w.ncols() {
                return Err(DnnError::Shape(format!(
                    "layer {k} outputs {} but layer {} takes {}",
                    pair[0].w.nrows(),
                    k + 1,
                    pair[1].w.ncols()
                )));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.b.len() != l.w.nrows() {
                return Err(DnnError::Shape(format!("bias of layer {k} has length {}", l.b.len())));
            }
        }
        let dims = self.dims();
        if dims[0] != 2 || *dims.last().unwrap() != 1 {
            return Err(DnnError::Shape(format!("{dims:?}")));
        }
        Ok(())
    }

    /// Standardized inputs for physical `(T, ψ)`.
    pub fn standardize_inputs(&self, t: f64, psi: f64) -> [f64; 2] {
        [self.input[0].standardize(t), self.input[1].standardize(psi)]
    }

    /// Network output on the standardized scale for a batch of standardized inputs.
    pub fn forward_std(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.w.t());
            z += &l.b;
            if k < last {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        a.column(0).to_owned()
    }

    /// Predicted saturation at physical `(T, ψ)`.
    pub fn forward(&self, t: f64, psi: f64) -> Result<f64> {
        self.validate()?;
        Ok(self.predict(t, psi))
    }

    fn predict(&self, t: f64, psi: f64) -> f64 {
        let x = self.standardize_inputs(t, psi);
        let mut a: Vec<f64> = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = l.b.to_vec();
            for (i, zi) in z.iter_mut().enumerate() {
                let row = l.w.row(i);
                *zi += row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
            }
            if k < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = z;
        }
        self.output.destandardize(a[0])
    }

    /// `(S, ∂S/∂ψ, ∂S/∂T)` with the input Jacobian propagated through the layers.
    ///
    /// Inputs outside the training box are extrapolated; the first such call
    /// logs a warning.
    pub fn saturation_and_derivs(&self, t: f64, psi: f64) -> (f64, f64, f64) {
        if let Some(b) = &self.domain {
            let outside = t < b.t[0] || t > b.t[1] || psi < b.psi[0] || psi > b.psi[1];
            if outside && !OUT_OF_RANGE_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "retention network evaluated outside its training box at T = {t:.2} °C, psi = {psi:.3} MPa; extrapolating"
                );
            }
        }
        let x = self.standardize_inputs(t, psi);
        let mut a: Vec<f64> = x.to_vec();
        // rows: d a / d x for each unit, two input columns
        let mut jac: Vec<[f64; 2]> = vec![[1.0, 0.0], [0.0, 1.0]];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let n_out = l.w.nrows();
            let mut z = l.b.to_vec();
            let mut dz = vec![[0.0; 2]; n_out];
            for i in 0..n_out {
                let row = l.w.row(i);
                for (j, &w) in row.iter().enumerate() {
                    z[i] += w * a[j];
                    dz[i][0] += w * jac[j][0];
                    dz[i][1] += w * jac[j][1];
                }
            }
            if k < last {
                for i in 0..n_out {
                    let h = z[i].tanh();
                    let d = 1.0 - h * h;
                    z[i] = h;
                    dz[i][0] *= d;
                    dz[i][1] *= d;
                }
            }
            a = z;
            jac = dz;
        }
        let s = self.output.destandardize(a[0]);
        let ds_dt = jac[0][0] * self.output.std / self.input[0].std;
        let ds_dpsi = jac[0][1] * self.output.std / self.input[1].std;
        (s, ds_dpsi, ds_dt)
    }

    /// Flattened weights then biases, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(DnnError::LengthMismatch(flat.len(), self.param_count()));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }
}

impl SaturationModel for MlpModel {
    fn saturation(&self, t: f64, psi: f64) -> crate::constitutive::Result<SaturationState> {
        let (s, ds_dpsi, ds_dt) = self.saturation_and_derivs(t, psi);
        Ok(SaturationState { s, ds_dpsi, ds_dt })
    }

    fn suction_range(&self) -> Option<[f64; 2]> {
        self.domain.map(|b| b.psi)
    }
}

/// Standardized inputs (columns `T`, `ψ`) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl Batch {
    pub fn from_points(model: &MlpModel, points: &[TrainingPoint]) -> Self {
        let mut x = Array2::zeros((points.len(), 2));
        let mut y = Array1::zeros(points.len());
        for (i, p) in points.iter().enumerate() {
            let s = model.standardize_inputs(p.temperature, p.psi);
            x[[i, 0]] = s[0];
            x[[i, 1]] = s[1];
            y[i] = model.output.standardize(p.saturation);
        }
        Self { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Penalty weights of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// Weight of `ReLU(Ŝ - 1)`.
    pub beta1: f64,
    /// Weight of `Σ ‖W‖_F²`.
    pub beta2: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { beta1: 1.0, beta2: 1e-5 }
    }
}

fn regularization(model: &MlpModel) -> f64 {
    model.layers.iter().map(|l| l.w.iter().map(|w| w * w).sum::<f64>()).sum()
}

/// Training loss on a batch.
pub fn loss(model: &MlpModel, batch: &Batch, lp: &LossParams) -> f64 {
    let pred = model.forward_std(batch.x.view());
    data_terms(model, batch, &pred, lp) + lp.beta2 * regularization(model)
}

fn data_terms(model: &MlpModel, batch: &Batch, pred: &Array1<f64>, lp: &LossParams) -> f64 {
    pred.iter()
        .zip(&batch.y)
        .map(|(p, y)| {
            let s = model.output.destandardize(*p);
            (y - p).powi(2) + lp.beta1 * (s - 1.0).max(0.0)
        })
        .sum()
}

/// Loss and its exact gradient with respect to every weight and bias.
pub fn grad(model: &MlpModel, batch: &Batch, lp: &LossParams) -> (f64, Vec<Layer>) {
    let last = model.layers.len() - 1;
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(model.layers.len() + 1);
    acts.push(batch.x.clone());
    for (k, l) in model.layers.iter().enumerate() {
        let mut z = acts[k].dot(&l.w.t());
        z += &l.b;
        if k < last {
            z.mapv_inplace(f64::tanh);
        }
        acts.push(z);
    }
    let pred = acts[last + 1].column(0).to_owned();
    let value = data_terms(model, batch, &pred, lp) + lp.beta2 * regularization(model);

    let sigma = model.output.std;
    let mut delta = Array2::zeros((batch.len(), 1));
    for i in 0..batch.len() {
        let s = model.output.destandardize(pred[i]);
        let penalty = if s > 1.0 { lp.beta1 * sigma } else { 0.0 };
        delta[[i, 0]] = -2.0 * (batch.y[i] - pred[i]) + penalty;
    }

    let mut grads: Vec<Layer> = model.layers.iter().map(Layer::zeros_like).collect();
    for k in (0..=last).rev() {
        let l = &model.layers[k];
        grads[k].w = delta.t().dot(&acts[k]) + &(&l.w * (2.0 * lp.beta2));
        grads[k].b = delta.sum_axis(Axis(0));
        if k > 0 {
            let mut back = delta.dot(&l.w);
            Zip::from(&mut back).and(&acts[k]).for_each(|d, &a| *d *= 1.0 - a * a);
            delta = back;
        }
    }
    (value, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta_m: f64,
    pub beta_v: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta_m: 0.9,
            beta_v: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], hp: &AdamParams) {
        self.t += 1;
        let c1 = 1.0 - hp.beta_m.powi(self.t as i32);
        let c2 = 1.0 - hp.beta_v.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta_m * self.m[i] + (1.0 - hp.beta_m) * g;
            self.v[i] = hp.beta_v * self.v[i] + (1.0 - hp.beta_v) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
}

/// Applies one Adam step to all network parameters.
pub fn adam_step(model: &mut MlpModel, state: &mut AdamState, grads: &[Layer], hp: &AdamParams) {
    state.t += 1;
    let c1 = 1.0 - hp.beta_m.powi(state.t as i32);
    let c2 = 1.0 - hp.beta_v.powi(state.t as i32);
    let mut k = 0;
    for (l, g) in model.layers.iter_mut().zip(grads) {
        for (p, gi) in l.w.iter_mut().chain(l.b.iter_mut()).zip(g.w.iter().chain(g.b.iter())) {
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            *m = hp.beta_m * *m + (1.0 - hp.beta_m) * gi;
            *v = hp.beta_v * *v + (1.0 - hp.beta_v) * gi * gi;
            *p -= hp.lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
            k += 1;
        }
    }
}

/// `‖S - Ŝ‖₂ / ‖S‖₂`.
pub fn relative_error(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    check_pair(s, s_hat)?;
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(DnnError::ZeroReference);
    }
    let diff = s.iter().zip(s_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

pub fn rmse(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    check_pair(s, s_hat)?;
    let mse = s.iter().zip(s_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.len() as f64;
    Ok(mse.sqrt())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(DnnError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(DnnError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ExperimentalImport,
    LuCurveSample,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::ExperimentalImport => "experimental-import",
            Provenance::LuCurveSample => "lu-curve-sample",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPoint {
    /// °C
    pub temperature: f64,
    /// MPa
    pub psi: f64,
    pub saturation: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub points: Vec<TrainingPoint>,
    pub noise_ratio: f64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-channel `[min, max]` of `T`, `ψ` and `S`.
    pub fn ranges(&self) -> [[f64; 2]; 3] {
        let mut r = [[f64::INFINITY, f64::NEG_INFINITY]; 3];
        for p in &self.points {
            for (k, v) in [p.temperature, p.psi, p.saturation].into_iter().enumerate() {
                r[k][0] = r[k][0].min(v);
                r[k][1] = r[k][1].max(v);
            }
        }
        r
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["T_C", "psi_MPa", "S", "provenance"])?;
        for p in &self.points {
            w.write_record([
                p.temperature.to_string(),
                p.psi.to_string(),
                p.saturation.to_string(),
                p.provenance.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut points = Vec::new();
        for rec in reader.deserialize::<(f64, f64, f64, Provenance)>() {
            let (temperature, psi, saturation, provenance) = rec?;
            points.push(TrainingPoint {
                temperature,
                psi,
                saturation,
                provenance,
            });
        }
        Ok(Self {
            points,
            noise_ratio: f64::NAN,
        })
    }
}

/// Log-spaced suction grid for sampling fitted curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl PsiGrid {
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let (a, b) = (self.min.ln(), self.max.ln());
        (0..self.count)
            .map(|i| (a + (b - a) * i as f64 / (self.count - 1) as f64).exp())
            .collect()
    }
}

/// Samples each fitted curve on `grid`, merges the measured points and
/// perturbs all three channels with Gaussian noise of deviation
/// `r · max(channel)`.
pub fn generate_training_data(
    fits: &[(f64, LuSwrcParams)],
    required: &[f64],
    experimental: &[RetentionPoint],
    grid: &PsiGrid,
    noise_ratio: f64,
    seed: u64,
) -> Result<TrainingSet> {
    for &t in required {
        if !fits.iter().any(|(ft, _)| (ft - t).abs() < 1e-9) {
            return Err(DnnError::MissingFit(t));
        }
    }
    if fits.is_empty() {
        return Err(DnnError::Empty);
    }
    let psis = grid.points();
    let mut points = Vec::with_capacity(fits.len() * psis.len() + experimental.len());
    for (t, p) in fits {
        for &psi in &psis {
            points.push(TrainingPoint {
                temperature: *t,
                psi,
                saturation: lu_swrc(psi, p)?,
                provenance: Provenance::LuCurveSample,
            });
        }
    }
    points.extend(experimental.iter().map(|e| TrainingPoint {
        temperature: e.temperature,
        psi: e.psi,
        saturation: e.saturation,
        provenance: Provenance::ExperimentalImport,
    }));

    if noise_ratio > 0.0 {
        let set = TrainingSet {
            points: points.clone(),
            noise_ratio,
        };
        let r = set.ranges();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dists: Vec<Normal<f64>> = r
            .iter()
            .map(|c| Normal::new(0.0, noise_ratio * c[1].abs()).expect("finite deviation"))
            .collect();
        for p in &mut points {
            p.temperature += dists[0].sample(&mut rng);
            p.psi += dists[1].sample(&mut rng);
            p.saturation += dists[2].sample(&mut rng);
        }
    }
    Ok(TrainingSet { points, noise_ratio })
}

/// Training options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    /// Stop when the training loss has not improved for this many epochs.
    pub patience: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub init_seed: u64,
    pub loss: LossParams,
    pub adam: AdamParams,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            patience: 2_000,
            train_fraction: 0.8,
            split_seed: 1,
            init_seed: 2,
            loss: LossParams::default(),
            adam: AdamParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train_relative_error: f64,
    pub test_relative_error: f64,
}

/// Seeded shuffle split into `round(fraction · N)` training and the rest test.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fraction * n as f64).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

/// Full-batch Adam training from a seeded Glorot initialization.
///
/// The parameters with the lowest training loss are returned.
pub fn train(data: &TrainingSet, params: &TrainParams) -> Result<TrainOutcome> {
    train_with_dims(data, params, &MlpModel::DIMS)
}

pub fn train_with_dims(data: &TrainingSet, params: &TrainParams, dims: &[usize]) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(DnnError::Empty);
    }
    let (train_idx, test_idx) = split_indices(data.len(), params.train_fraction, params.split_seed);
    let train_pts: Vec<TrainingPoint> = train_idx.iter().map(|&i| data.points[i]).collect();
    let test_pts: Vec<TrainingPoint> = test_idx.iter().map(|&i| data.points[i]).collect();

    let mut model = MlpModel::glorot(dims, params.init_seed)?;
    model.input = [
        Standardizer::fit(train_pts.iter().map(|p| p.temperature), "T")?,
        Standardizer::fit(train_pts.iter().map(|p| p.psi), "psi")?,
    ];
    model.output = Standardizer::fit(train_pts.iter().map(|p| p.saturation), "S")?;
    let r = data.ranges();
    model.domain = Some(InputBox { t: r[0], psi: r[1] });

    let train_batch = Batch::from_points(&model, &train_pts);
    let test_batch = Batch::from_points(&model, &test_pts);
    let mut state = AdamState::new(model.param_count());
    let mut history = Vec::with_capacity(params.epochs);
    let mut best = (f64::INFINITY, 0usize, model.clone());

    for epoch in 0..params.epochs {
        let (value, grads) = grad(&model, &train_batch, &params.loss);
        if !value.is_finite() {
            return Err(DnnError::Diverged { epoch, loss: value });
        }
        if value < best.0 {
            best = (value, epoch, model.clone());
        }
        let test = if test_batch.is_empty() {
            f64::NAN
        } else {
            loss(&model, &test_batch, &params.loss)
        };
        history.push(EpochLoss { train: value, test });
        if epoch - best.1 >= params.patience {
            break;
        }
        adam_step(&mut model, &mut state, &grads, &params.adam);
    }
    let final_value = loss(&model, &train_batch, &params.loss);
    if final_value < best.0 {
        best = (final_value, history.len(), model);
    }
    let (_, best_epoch, model) = best;

    let rel = |pts: &[TrainingPoint]| -> Result<f64> {
        if pts.is_empty() {
            return Ok(f64::NAN);
        }
        let s: Vec<f64> = pts.iter().map(|p| p.saturation).collect();
        let pred: Vec<f64> = pts.iter().map(|p| model.predict(p.temperature, p.psi)).collect();
        relative_error(&s, &pred)
    };
    Ok(TrainOutcome {
        train_relative_error: rel(&train_pts)?,
        test_relative_error: rel(&test_pts)?,
        model,
        history,
        best_epoch,
        train_indices: train_idx,
        test_indices: test_idx,
    })
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dims: Vec<usize>,
    hidden_activation: String,
    output_activation: String,
    /// Row-major `(out, in)` weight matrices.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    standardizers: StandardizerSet,
    domain: Option<InputBox>,
}

#[derive(Serialize, Deserialize)]
struct StandardizerSet {
    t: Standardizer,
    psi: Standardizer,
    s: Standardizer,
}

impl MlpModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dims: self.dims(),
            hidden_activation: "tanh".into(),
            output_activation: "linear".into(),
            weights: self.layers.iter().map(|l| l.w.iter().copied().collect()).collect(),
            biases: self.layers.iter().map(|l| l.b.to_vec()).collect(),
            standardizers: StandardizerSet {
                t: self.input[0],
                psi: self.input[1],
                s: self.output,
            },
            domain: self.domain,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(DnnError::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        if file.hidden_activation != "tanh" || file.output_activation != "linear" {
            return Err(DnnError::Format("unsupported activations".into()));
        }
        let mut model = Self::zeros(&file.dims)?;
        if file.weights.len() != model.layers.len() || file.biases.len() != model.layers.len() {
            return Err(DnnError::Shape("layer count does not match dims".into()));
        }
        for (k, l) in model.layers.iter_mut().enumerate() {
            let shape = l.w.raw_dim();
            l.w = Array2::from_shape_vec(shape, file.weights[k].clone())
                .map_err(|e| DnnError::Shape(format!("layer {k}: {e}")))?;
            if file.biases[k].len() != l.b.len() {
                return Err(DnnError::Shape(format!("bias {k}")));
            }
            l.b = Array1::from(file.biases[k].clone());
        }
        model.input = [file.standardizers.t, file.standardizers.psi];
        model.output = file.standardizers.s;
        model.domain = file.domain;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Settings of the default synthetic retention study: a reference family of
/// Lu curves, measured at fixed saturation levels, fitted per temperature and
/// resampled into a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproductionSpec {
    pub family: SyntheticRetention,
    /// Temperatures with a fitted curve, °C.
    pub fit_temperatures: Vec<f64>,
    /// Extra measurement temperatures without a fit, °C.
    pub extra_temperatures: Vec<f64>,
    pub levels: Vec<f64>,
    pub grid: PsiGrid,
    pub noise_ratio: f64,
    pub noise_seed: u64,
    pub fit: FitOptions,
}

impl Default for ReproductionSpec {
    fn default() -> Self {
        Self {
            family: SyntheticRetention::default(),
            fit_temperatures: vec![24.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
            extra_temperatures: vec![120.0],
            levels: vec![0.26, 0.34, 0.42, 0.50, 0.58, 0.66, 0.74],
            // 9 curves x 289 + 70 measured points = 2,671
            grid: PsiGrid {
                min: 0.5,
                max: 120.0,
                count: 289,
            },
            noise_ratio: 1e-3,
            noise_seed: 3,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reproduction {
    pub measurements: Vec<RetentionPoint>,
    pub fits: Vec<(f64, LuFit)>,
    pub dataset: TrainingSet,
}

impl Reproduction {
    pub fn fit_params(&self) -> Vec<(f64, LuSwrcParams)> {
        self.fits.iter().map(|(t, f)| (*t, f.params)).collect()
    }
}

/// Fits one Lu curve per temperature present in `points`.
pub fn fit_by_temperature(
    points: &[RetentionPoint],
    temperatures: &[f64],
    theta_s: f64,
    opts: &FitOptions,
) -> Result<Vec<(f64, LuFit)>> {
    temperatures
        .iter()
        .map(|&t| {
            let samples: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| (p.temperature - t).abs() < 1e-9)
                .map(|p| (p.psi, p.saturation))
                .collect();
            Ok((t, crate::constitutive::fit_lu(&samples, theta_s, opts)?))
        })
        .collect()
}

pub fn build_reproduction(spec: &ReproductionSpec) -> Result<Reproduction> {
    let mut temps = spec.fit_temperatures.clone();
    temps.extend(&spec.extra_temperatures);
    let measurements = spec.family.measurements(&temps, &spec.levels)?;
    let fits = fit_by_temperature(&measurements, &spec.fit_temperatures, spec.family.theta_s, &spec.fit)?;
    let params: Vec<(f64, LuSwrcParams)> = fits.iter().map(|(t, f)| (*t, f.params)).collect();
    let dataset = generate_training_data(
        &params,
        &spec.fit_temperatures,
        &measurements,
        &spec.grid,
        spec.noise_ratio,
        spec.noise_seed,
    )?;
    Ok(Reproduction {
        measurements,
        fits,
        dataset,
    })
}

/// RMSE of the network against one Lu curve sampled on `grid`.
pub fn curve_rmse(model: &MlpModel, params: &LuSwrcParams, t: f64, grid: &PsiGrid) -> Result<f64> {
    let psis = grid.points();
    let truth: Vec<f64> = psis.iter().map(|&psi| lu_swrc(psi, params)).collect::<Result<_, _>>()?;
    let pred: Vec<f64> = psis.iter().map(|&psi| model.predict(t, psi)).collect();
    rmse(&truth, &pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> MlpModel {
        let mut m = MlpModel::glorot(&[2, 3, 3, 1], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in &mut m.layers {
            l.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        m.input = [Standardizer { mean: 60.0, std: 25.0 }, Standardizer { mean: 30.0, std: 35.0 }];
        m.output = Standardizer { mean: 0.5, std: 0.2 };
        m
    }

    fn tiny_batch(m: &MlpModel) -> Batch {
        let pts: Vec<TrainingPoint> = (0..7)
            .map(|i| TrainingPoint {
                temperature: 24.0 + 13.0 * i as f64,
                psi: 0.5 + 15.0 * i as f64,
                saturation: 0.8 - 0.09 * i as f64,
                provenance: Provenance::LuCurveSample,
            })
            .collect();
        Batch::from_points(m, &pts)
    }

    #[test]
    fn parameter_count() {
        let m = MlpModel::zeros(&MlpModel::DIMS).unwrap();
        assert_eq!(m.param_count(), 10_501);
        assert!(MlpModel::zeros(&[3, 4, 1]).is_err());
    }

    #[test]
    fn zero_weights_collapse_to_output_bias() {
        let mut m = MlpModel::zeros(&MlpModel::DIMS).unwrap();
        m.output = Standardizer { mean: 0.4, std: 0.2 };
        m.layers[2].b[0] = 0.7;
        assert!((m.forward(50.0, 10.0).unwrap() - (0.7 * 0.2 + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn mean_inputs_standardize_to_zero() {
        let m = tiny(1);
        assert_eq!(m.standardize_inputs(60.0, 30.0), [0.0, 0.0]);
    }

    #[test]
    fn standardizer_round_trip() {
        let s = Standardizer::fit([1.0, 2.0, 4.0, 8.0], "x").unwrap();
        for v in [-3.0, 0.0, 1.5, 1e3] {
            assert!((s.destandardize(s.standardize(v)) - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
        assert!(Standardizer::fit([2.0, 2.0], "x").is_err());
    }

    #[test]
    fn forward_matches_layerwise_evaluation() {
        let m = tiny(3);
        let (t, psi) = (47.0, 12.0);
        let x = [(t - 60.0) / 25.0, (psi - 30.0) / 35.0];
        let mut a = x.to_vec();
        for (k, l) in m.layers.iter().enumerate() {
            let mut z = vec![0.0; l.w.nrows()];
            for i in 0..z.len() {
                z[i] = l.b[i] + (0..a.len()).map(|j| l.w[[i, j]] * a[j]).sum::<f64>();
                if k < 2 {
                    z[i] = z[i].tanh();
                }
            }
            a = z;
        }
        let expected = a[0] * 0.2 + 0.5;
        assert!((m.forward(t, psi).unwrap() - expected).abs() < 1e-12);
        let batch = m.forward_std(ndarray::array![[x[0], x[1]]].view());
        assert!((batch[0] * 0.2 + 0.5 - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_terms() {
        let mut m = MlpModel::zeros(&[2, 3, 1]).unwrap();
        let pts = [TrainingPoint {
            temperature: 0.0,
            psi: 0.0,
            saturation: 0.0,
            provenance: Provenance::LuCurveSample,
        }];
        let b = Batch::from_points(&m, &pts);
        assert_eq!(loss(&m, &b, &LossParams::default()), 0.0);

        // prediction 1.2 against target 1.2: only the penalty remains
        m.layers[1].b[0] = 1.2;
        let b = Batch {
            x: ndarray::array![[0.0, 0.0]],
            y: ndarray::array![1.2],
        };
        let lp = LossParams { beta1: 1.0, beta2: 0.0 };
        assert!((loss(&m, &b, &lp) - 0.2).abs() < 1e-15);

        let m = tiny(4);
        let mut b = tiny_batch(&m);
        b.y = m.forward_std(b.x.view());
        let lp = LossParams { beta1: 1.0, beta2: 1e-5 };
        let direct: f64 = m.layers.iter().flat_map(|l| l.w.iter()).map(|w| w * w).sum::<f64>() * 1e-5;
        assert!((loss(&m, &b, &lp) - direct).abs() < 1e-18);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let m = tiny(5);
        let b = tiny_batch(&m);
        let lp = LossParams { beta1: 1.0, beta2: 1e-3 };
        let (_, g) = grad(&m, &b, &lp);
        let flat_g: Vec<f64> = g.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>()).collect();
        let base = m.to_flat();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut p = m.clone();
            let mut q = base.clone();
            q[k] += h;
            p.set_flat(&q).unwrap();
            let up = loss(&p, &b, &lp);
            q[k] -= 2.0 * h;
            p.set_flat(&q).unwrap();
            let dn = loss(&p, &b, &lp);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - flat_g[k]).abs() <= 1e-8 * fd.abs().max(1e-2), "param {k}: {fd} vs {}", flat_g[k]);
        }
    }

    #[test]
    fn regularization_gradient_alone() {
        let m = tiny(6);
        let b = Batch {
            x: Array2::zeros((0, 2)),
            y: Array1::zeros(0),
        };
        let lp = LossParams { beta1: 1.0, beta2: 0.3 };
        let (_, g) = grad(&m, &b, &lp);
        for (gl, l) in g.iter().zip(&m.layers) {
            for (a, w) in gl.w.iter().zip(l.w.iter()) {
                assert!((a - 2.0 * 0.3 * w).abs() < 1e-15);
            }
            assert!(gl.b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn stationary_toy_model_has_zero_gradient() {
        let mut m = MlpModel::zeros(&[2, 1]).unwrap();
        m.layers[0].b[0] = 0.25;
        let b = Batch {
            x: ndarray::array![[0.0, 0.0], [0.0, 0.0]],
            y: ndarray::array![0.0, 0.5],
        };
        let (_, g) = grad(&m, &b, &LossParams::default());
        assert!(g[0].b[0].abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let hp = AdamParams::default();
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(3);
        st.update(&mut p, &[0.5, -7.0, 1e-3], &hp);
        for (a, b) in p.iter().zip([1.0 - 1e-3, -2.0 + 1e-3, 3.0 - 1e-3]) {
            assert!((a - b).abs() < 1e-8);
        }
        let before = p.clone();
        let mut st = AdamState::new(3);
        st.update(&mut p, &[0.0; 3], &hp);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let hp = AdamParams::default();
        let mut x = [2.0];
        let mut st = AdamState::new(1);
        for _ in 0..5000 {
            let g = [2.0 * (x[0] - 3.0)];
            st.update(&mut x, &g, &hp);
        }
        assert!((x[0] - 3.0).abs() < 1e-6, "{}", x[0]);
    }

    #[test]
    fn layer_adam_matches_flat_adam() {
        let mut m = tiny(7);
        let b = tiny_batch(&m);
        let (_, g) = grad(&m, &b, &LossParams::default());
        let mut flat = m.to_flat();
        let flat_g: Vec<f64> = g.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>()).collect();
        let hp = AdamParams::default();
        AdamState::new(flat.len()).update(&mut flat, &flat_g, &hp);
        adam_step(&mut m, &mut AdamState::new(flat.len()), &g, &hp);
        assert_eq!(m.to_flat(), flat);
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let m = tiny(8);
        let (t, psi) = (55.0, 20.0);
        let (_, dpsi, dt) = m.saturation_and_derivs(t, psi);
        let h = 1e-4;
        let fd_t = (m.forward(t + h, psi).unwrap() - m.forward(t - h, psi).unwrap()) / (2.0 * h);
        let fd_p = (m.forward(t, psi + h).unwrap() - m.forward(t, psi - h).unwrap()) / (2.0 * h);
        assert!((dt - fd_t).abs() <= 1e-6 * fd_t.abs());
        assert!((dpsi - fd_p).abs() <= 1e-6 * fd_p.abs());
    }

    #[test]
    fn metrics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!((rmse(&[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(relative_error(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn split_sizes() {
        let (a, b) = split_indices(2671, 0.8, 1);
        assert_eq!(a.len(), 2137);
        assert_eq!(b.len(), 534);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2671).collect::<Vec<_>>());
    }

    #[test]
    fn generation_size_and_zero_noise() {
        let spec = ReproductionSpec {
            noise_ratio: 0.0,
            ..Default::default()
        };
        let rep = build_reproduction(&spec).unwrap();
        assert_eq!(rep.dataset.len(), 2671);
        let params = rep.fit_params();
        for p in rep.dataset.points.iter().filter(|p| p.provenance == Provenance::LuCurveSample) {
            let (_, fit) = params.iter().find(|(t, _)| *t == p.temperature).unwrap();
            assert_eq!(p.saturation, lu_swrc(p.psi, fit).unwrap());
        }
        let err = generate_training_data(&params[1..], &spec.fit_temperatures, &[], &spec.grid, 0.0, 0).unwrap_err();
        assert!(matches!(err, DnnError::MissingFit(t) if t == 24.0));
    }

    #[test]
    fn model_json_round_trip() {
        let m = tiny(9);
        let back = MlpModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let bad = m.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(MlpModel::from_json(&bad), Err(DnnError::Format(_))));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let set = TrainingSet {
            points: vec![
                TrainingPoint {
                    temperature: 24.5,
                    psi: 0.75,
                    saturation: 0.8,
                    provenance: Provenance::LuCurveSample,
                },
                TrainingPoint {
                    temperature: 120.0,
                    psi: 3.25,
                    saturation: 0.4,
                    provenance: Provenance::ExperimentalImport,
                },
            ],
            noise_ratio: 0.0,
        };
        set.write_csv(&path).unwrap();
        assert_eq!(TrainingSet::read_csv(&path).unwrap().points, set.points);
    }

    #[test]
    fn learns_a_linear_target() {
        let pts: Vec<TrainingPoint> = (0..400)
            .map(|i| {
                let t = 24.0 + 96.0 * ((i * 37) % 400) as f64 / 399.0;
                let psi = 0.5 + 119.5 * i as f64 / 399.0;
                TrainingPoint {
                    temperature: t,
                    psi,
                    saturation: 0.9 - 0.002 * t - 0.003 * psi,
                    provenance: Provenance::LuCurveSample,
                }
            })
            .collect();
        let set = TrainingSet {
            points: pts,
            noise_ratio: 0.0,
        };
        let params = TrainParams {
            epochs: 3000,
            ..Default::default()
        };
        let out = train_with_dims(&set, &params, &[2, 20, 20, 1]).unwrap();
        assert!(out.train_relative_error <= 5e-3, "{}", out.train_relative_error);
        assert!(out.test_relative_error <= 5e-3, "{}", out.test_relative_error);
    }
}
