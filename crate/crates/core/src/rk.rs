//! Reproducing-kernel (RK) shape functions over a 2D `(r, z)` node cloud.
//!
//! The approximation reproduces the linear monomials `1, r, z` and, when the
//! basis is enriched, the logarithm `log r`. Kernels are circular cubic
//! B-splines with per-node support radii. Nodes flagged as singular use a
//! kernel that blows up at the node itself, which gives the shape functions
//! the Kronecker-delta property at those nodes.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

/// Moment matrices with a 1-norm condition estimate above this are rejected.
pub const MAX_MOMENT_CONDITION: f64 = 1e12;

/// Default ratio of support radius to local nodal spacing. The enriched basis
/// needs three distinct node columns inside every support, which a ratio of
/// exactly 2 does not give at boundary points.
pub const DEFAULT_SUPPORT_FACTOR: f64 = 2.5;

/// Relative distance below which an evaluation point is treated as sitting
/// exactly on a singular-kernel node.
const SINGULAR_SNAP: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RkError {
    #[error("kernel argument must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("log enrichment needs positive radii (r = {r}, r_I = {r_node})")]
    NonPositiveRadius { r: f64, r_node: f64 },
    #[error("invalid node cloud: {0}")]
    InvalidCloud(String),
    #[error(
        "moment matrix at ({:.6e}, {:.6e}) is singular or ill-conditioned (condition {condition:.3e}, {covering} covering nodes)",
        point[0], point[1]
    )]
    SingularMoment {
        point: [f64; 2],
        condition: f64,
        covering: usize,
    },
}

/// Cubic B-spline kernel with compact support on `s in [0, 1)`.
///
/// Normalized so that `phi(0) = 2/3` and `phi(1/2) = 1/6`.
pub fn eval_kernel(s: f64) -> Result<f64, RkError> {
    if s < 0.0 || s.is_nan() {
        return Err(RkError::NegativeDistance(s));
    }
    Ok(kernel_and_slope(s).0)
}

/// Kernel value and `d phi / d s`.
pub(crate) fn kernel_and_slope(s: f64) -> (f64, f64) {
    if s >= 1.0 {
        (0.0, 0.0)
    } else if s <= 0.5 {
        (
            2.0 / 3.0 - 4.0 * s * s + 4.0 * s * s * s,
            -8.0 * s + 12.0 * s * s,
        )
    } else {
        let t = 1.0 - s;
        (4.0 / 3.0 * t * t * t, -4.0 * t * t)
    }
}

/// Basis choice for the RK approximation. Only linear monomials are supported.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BasisSpec {
    /// Append `log(r / r_I)` to the basis.
    pub enriched: bool,
    /// Radius beyond which the log column is dropped. `None` keeps it everywhere.
    #[serde(default)]
    pub log_cutoff: Option<f64>,
}

impl BasisSpec {
    pub const LINEAR: BasisSpec = BasisSpec {
        enriched: false,
        log_cutoff: None,
    };
    pub const ENRICHED: BasisSpec = BasisSpec {
        enriched: true,
        log_cutoff: None,
    };

    /// Monomial order of the basis.
    pub fn order(&self) -> usize {
        1
    }

    /// Whether the log column is active at radius `r`.
    pub fn enriched_at(&self, r: f64) -> bool {
        self.enriched && self.log_cutoff.is_none_or(|cut| r <= cut)
    }

    pub fn len_at(&self, r: f64) -> usize {
        if self.enriched_at(r) {
            4
        } else {
            3
        }
    }
}

/// Basis vector `H(x - x_I)` in physical (unscaled) coordinates.
pub fn build_basis(dr: f64, dz: f64, r: f64, r_node: f64, spec: BasisSpec) -> Result<Vec<f64>, RkError> {
    let mut h = vec![1.0, dr, dz];
    if spec.enriched_at(r) {
        if r <= 0.0 || r_node <= 0.0 {
            return Err(RkError::NonPositiveRadius { r, r_node });
        }
        h.push((r / r_node).ln());
    }
    Ok(h)
}

/// Nodes of the discretization with their support radii.
#[derive(Debug, Clone)]
pub struct NodeCloud {
    coords: Vec<[f64; 2]>,
    support: Vec<f64>,
    singular: Vec<bool>,
    bins: BinGrid,
}

impl NodeCloud {
    pub fn new(coords: Vec<[f64; 2]>, support: Vec<f64>) -> Result<Self, RkError> {
        if coords.is_empty() {
            return Err(RkError::InvalidCloud("no nodes".into()));
        }
        if coords.len() != support.len() {
            return Err(RkError::InvalidCloud(format!(
                "{} coordinates but {} support radii",
                coords.len(),
                support.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| !(c[0] > 0.0) || !c[1].is_finite()) {
            return Err(RkError::InvalidCloud(format!(
                "node {i} at r = {} is not in r > 0",
                coords[i][0]
            )));
        }
        if let Some(i) = support.iter().position(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(RkError::InvalidCloud(format!(
                "node {i} has non-positive support radius {}",
                support[i]
            )));
        }
        let bins = BinGrid::new(&coords, &support);
        let n = coords.len();
        Ok(Self {
            coords,
            support,
            singular: vec![false; n],
            bins,
        })
    }

    /// Tensor-grid cloud with `a_I = factor * local spacing`.
    ///
    /// The local spacing of a node is the largest distance to its grid
    /// neighbours along either direction.
    pub fn from_grid(r_lines: &[f64], z_lines: &[f64], factor: f64) -> Result<Self, RkError> {
        if r_lines.is_empty() || z_lines.is_empty() {
            return Err(RkError::InvalidCloud("empty grid".into()));
        }
        let local = |lines: &[f64], i: usize| -> f64 {
            let left = if i > 0 { lines[i] - lines[i - 1] } else { 0.0 };
            let right = if i + 1 < lines.len() { lines[i + 1] - lines[i] } else { 0.0 };
            left.max(right)
        };
        let mut coords = Vec::with_capacity(r_lines.len() * z_lines.len());
        let mut support = Vec::with_capacity(coords.capacity());
        for (i, &r) in r_lines.iter().enumerate() {
            for (j, &z) in z_lines.iter().enumerate() {
                let h = local(r_lines, i).max(local(z_lines, j));
                coords.push([r, z]);
                support.push(factor * h);
            }
        }
        Self::new(coords, support)
    }

    /// Marks nodes whose kernels are made singular at their own centers.
    pub fn with_singular_nodes(mut self, ids: &[usize]) -> Self {
        for &i in ids {
            self.singular[i] = true;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> [f64; 2] {
        self.coords[i]
    }

    pub fn support(&self, i: usize) -> f64 {
        self.support[i]
    }

    pub fn supports(&self) -> &[f64] {
        &self.support
    }

    pub fn is_singular(&self, i: usize) -> bool {
        self.singular[i]
    }

    /// Nodes whose support strictly contains `point`.
    pub fn covering(&self, point: [f64; 2]) -> Vec<usize> {
        let mut out = Vec::new();
        self.bins.for_candidates(point, |i| {
            let c = self.coords[i];
            let d = ((point[0] - c[0]).powi(2) + (point[1] - c[1]).powi(2)).sqrt();
            if d < self.support[i] {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }
}

/// Uniform bucket grid for support queries.
#[derive(Debug, Clone)]
struct BinGrid {
    origin: [f64; 2],
    size: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl BinGrid {
    fn new(coords: &[[f64; 2]], support: &[f64]) -> Self {
        let size = support.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in coords {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let dims = [
            ((hi[0] - lo[0]) / size).floor() as usize + 1,
            ((hi[1] - lo[1]) / size).floor() as usize + 1,
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        let mut grid = Self {
            origin: lo,
            size,
            dims,
            buckets: Vec::new(),
        };
        for (i, c) in coords.iter().enumerate() {
            let (bi, bj) = grid.bin_of(*c);
            buckets[bi * dims[1] + bj].push(i);
        }
        grid.buckets = buckets;
        grid
    }

    fn bin_of(&self, p: [f64; 2]) -> (usize, usize) {
        let f = |k: usize| {
            let v = ((p[k] - self.origin[k]) / self.size).floor();
            (v.max(0.0) as usize).min(self.dims[k] - 1)
        };
        (f(0), f(1))
    }

    fn for_candidates(&self, p: [f64; 2], mut f: impl FnMut(usize)) {
        let raw = |k: usize| ((p[k] - self.origin[k]) / self.size).floor() as i64;
        let (ci, cj) = (raw(0), raw(1));
        for bi in (ci - 1)..=(ci + 1) {
            if bi < 0 || bi >= self.dims[0] as i64 {
                continue;
            }
            for bj in (cj - 1)..=(cj + 1) {
                if bj < 0 || bj >= self.dims[1] as i64 {
                    continue;
                }
                for &i in &self.buckets[bi as usize * self.dims[1] + bj as usize] {
                    f(i);
                }
            }
        }
    }
}

/// Shape-function values and direct gradients of every node covering a point.
#[derive(Debug, Clone, PartialEq)]
pub struct RkShapeSet {
    pub point: [f64; 2],
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
    pub grad_r: Vec<f64>,
    pub grad_z: Vec<f64>,
}

impl RkShapeSet {
    /// `sum_I Psi_I(x) d_I`.
    pub fn interpolate(&self, coeffs: &[f64]) -> f64 {
        self.nodes.iter().zip(&self.values).map(|(&i, v)| v * coeffs[i]).sum()
    }

    /// Direct (unsmoothed) gradient of the approximated field.
    pub fn interpolate_grad(&self, coeffs: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (k, &i) in self.nodes.iter().enumerate() {
            g[0] += self.grad_r[k] * coeffs[i];
            g[1] += self.grad_z[k] * coeffs[i];
        }
        g
    }

    pub fn value_of(&self, node: usize) -> f64 {
        self.nodes
            .binary_search(&node)
            .map(|k| self.values[k])
            .unwrap_or(0.0)
    }
}

/// Anything that can produce RK shape sets at arbitrary points.
pub trait ShapeEvaluator {
    fn shapes_at(&self, point: [f64; 2]) -> Result<RkShapeSet, RkError>;
}

/// A node cloud paired with a basis choice.
#[derive(Debug, Clone, Copy)]
pub struct RkApproximation<'a> {
    pub cloud: &'a NodeCloud,
    pub spec: BasisSpec,
}

impl<'a> RkApproximation<'a> {
    pub fn new(cloud: &'a NodeCloud, spec: BasisSpec) -> Self {
        Self { cloud, spec }
    }
}

impl ShapeEvaluator for RkApproximation<'_> {
    fn shapes_at(&self, point: [f64; 2]) -> Result<RkShapeSet, RkError> {
        shape_functions(point, self.cloud, self.spec)
    }
}

/// `Psi_I(x) = H^T(0) M^{-1}(x) H(x - x_I) Phi_a(x - x_I)` and its gradient.
pub fn shape_functions(point: [f64; 2], cloud: &NodeCloud, spec: BasisSpec) -> Result<RkShapeSet, RkError> {
    let nodes = cloud.covering(point);
    if let Some(&snap) = nodes.iter().find(|&&i| {
        cloud.singular[i] && distance(point, cloud.coords[i]) < SINGULAR_SNAP * cloud.support[i]
    }) {
        let values = nodes.iter().map(|&i| if i == snap { 1.0 } else { 0.0 }).collect();
        let n = nodes.len();
        return Ok(RkShapeSet {
            point,
            nodes,
            values,
            grad_r: vec![0.0; n],
            grad_z: vec![0.0; n],
        });
    }
    if spec.enriched_at(point[0]) {
        if point[0] <= 0.0 {
            return Err(RkError::NonPositiveRadius {
                r: point[0],
                r_node: f64::NAN,
            });
        }
        solve_shapes::<4>(point, nodes, cloud)
    } else {
        solve_shapes::<3>(point, nodes, cloud)
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Kernel weight and its gradient with respect to the evaluation point.
fn weight(point: [f64; 2], node: [f64; 2], a: f64, singular: bool) -> (f64, [f64; 2]) {
    let dr = point[0] - node[0];
    let dz = point[1] - node[1];
    let d = (dr * dr + dz * dz).sqrt();
    let s = d / a;
    let (mut w, mut dw) = kernel_and_slope(s);
    if singular {
        let s2 = s * s;
        dw = dw / s2 - 2.0 * w / (s2 * s);
        w /= s2;
    }
    if d == 0.0 {
        return (w, [0.0, 0.0]);
    }
    let f = dw / (d * a);
    (w, [f * dr, f * dz])
}

fn solve_shapes<const N: usize>(
    point: [f64; 2],
    nodes: Vec<usize>,
    cloud: &NodeCloud,
) -> Result<RkShapeSet, RkError> {
    type Mat<const N: usize> = SMatrix<f64, N, N>;
    type Vector<const N: usize> = SVector<f64, N>;

    let covering = nodes.len();
    let fail = |condition: f64| RkError::SingularMoment {
        point,
        condition,
        covering,
    };
    if covering == 0 {
        return Err(fail(f64::INFINITY));
    }
    let r = point[0];
    // Scaling the monomial columns by a length keeps M well conditioned; the
    // shape functions are invariant under this change of basis.
    let h = nodes
        .iter()
        .map(|&i| cloud.support[i])
        .fold(f64::INFINITY, f64::min);

    let basis = |node: [f64; 2]| -> (Vector<N>, Vector<N>, Vector<N>) {
        let mut b = Vector::<N>::zeros();
        let mut br = Vector::<N>::zeros();
        let mut bz = Vector::<N>::zeros();
        b[0] = 1.0;
        b[1] = (r - node[0]) / h;
        b[2] = (point[1] - node[1]) / h;
        br[1] = 1.0 / h;
        bz[2] = 1.0 / h;
        if N == 4 {
            // ln(r/r_I) minus its linear part about r, scaled by (r/h)².
            // This is a point-wise change of basis of {1, r - r_I, ln(r/r_I)}
            // that stays O(1) far from the axis, where the raw log column is
            // nearly collinear with the linear one.
            let c = (r / h).powi(2);
            let g = (r / node[0]).ln() - 1.0 + node[0] / r;
            b[3] = c * g;
            br[3] = 2.0 * r / (h * h) * g + c * (r - node[0]) / (r * r);
        }
        (b, br, bz)
    };

    let mut m = Mat::<N>::zeros();
    let mut mr = Mat::<N>::zeros();
    let mut mz = Mat::<N>::zeros();
    let mut cache = Vec::with_capacity(covering);
    for &i in &nodes {
        let node = cloud.coords[i];
        let (w, dw) = weight(point, node, cloud.support[i], cloud.singular[i]);
        let (b, br, bz) = basis(node);
        let bbt = b * b.transpose();
        m += bbt * w;
        mr += bbt * dw[0] + (br * b.transpose() + b * br.transpose()) * w;
        mz += bbt * dw[1] + (bz * b.transpose() + b * bz.transpose()) * w;
        cache.push((w, dw, b, br, bz));
    }

    let minv = m.try_inverse().ok_or_else(|| fail(f64::INFINITY))?;
    let norm1 = |a: &Mat<N>| {
        (0..N)
            .map(|j| (0..N).map(|i| a[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let condition = norm1(&m) * norm1(&minv);
    if !condition.is_finite() || condition > MAX_MOMENT_CONDITION {
        return Err(fail(condition));
    }

    let mut h0 = Vector::<N>::zeros();
    h0[0] = 1.0;
    let coef = minv * h0;
    let coef_r = -(minv * (mr * coef));
    let coef_z = -(minv * (mz * coef));

    let mut values = Vec::with_capacity(covering);
    let mut grad_r = Vec::with_capacity(covering);
    let mut grad_z = Vec::with_capacity(covering);
    for (w, dw, b, br, bz) in cache {
        let cb = coef.dot(&b);
        values.push(cb * w);
        grad_r.push((coef_r.dot(&b) + coef.dot(&br)) * w + cb * dw[0]);
        grad_z.push((coef_z.dot(&b) + coef.dot(&bz)) * w + cb * dw[1]);
    }
    Ok(RkShapeSet {
        point,
        nodes,
        values,
        grad_r,
        grad_z,
    })
}

/// Largest componentwise violation of `sum_I Psi_I H(x - x_I) = H(0)`.
pub fn verify_reproduction(point: [f64; 2], cloud: &NodeCloud, spec: BasisSpec) -> Result<f64, RkError> {
    let set = shape_functions(point, cloud, spec)?;
    let len = spec.len_at(point[0]);
    let mut sum = vec![0.0; len];
    for (&i, &psi) in set.nodes.iter().zip(&set.values) {
        let c = cloud.coords[i];
        let h = build_basis(point[0] - c[0], point[1] - c[1], point[0], c[0], spec)?;
        for (s, hk) in sum.iter_mut().zip(h) {
            *s += psi * hk;
        }
    }
    sum[0] -= 1.0;
    Ok(sum.iter().fold(0.0, |acc, v| acc.max(v.abs())))
}
