//! Conforming rectangular smoothing cells and stabilized conforming nodal
//! integration (SCNI) of shape-function gradients.
//!
//! Nodes sit on a tensor grid spanning the whole `(r, z)` rectangle. Each node
//! owns the dual rectangle bounded by the midpoints to its neighbours, so nodes
//! on the domain boundary own half cells and corner nodes quarter cells.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix4};
use thiserror::Error;

use crate::rk::{BasisSpec, NodeCloud, RkApproximation, RkError, ShapeEvaluator};

const GAUSS2: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

/// Points per edge used by the smoothing operators.
pub const EDGE_POINTS: usize = 2;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(t) and its derivative
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let k = k as f64;
                (p0, p1) = (p1, ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k);
            }
            let pn = if n == 1 { t } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (t * pn - pm) / (t * t - 1.0);
            let step = pn / dp;
            t -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -t;
        x[n - 1 - i] = t;
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScniError {
    #[error("degenerate partition: {0}")]
    Degenerate(String),
    #[error("cell {cell} has non-positive centroid radius {r}")]
    NonPositiveRadius { cell: usize, r: f64 },
    #[error("shape functions failed in cell {cell}: {source}")]
    Shapes {
        cell: usize,
        #[source]
        source: RkError,
    },
    #[error("patch-test system is singular")]
    SingularSystem,
}

/// Which side of the rectangular domain an edge lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Inner,
    Outer,
    Bottom,
    Top,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub normal: [f64; 2],
    pub length: f64,
    /// Domain side for boundary edges, `None` for edges shared with a neighbour.
    pub boundary: Option<Side>,
}

impl Edge {
    /// Two-point Gauss rule along the edge as `(point, weight)` pairs.
    pub fn quadrature(&self) -> [([f64; 2], f64); 2] {
        GAUSS2.map(|xi| (self.at(xi), 0.5 * self.length))
    }

    /// `n`-point Gauss rule along the edge.
    pub fn quadrature_n(&self, n: usize) -> Vec<([f64; 2], f64)> {
        let (x, w) = gauss_legendre(n);
        x.into_iter().zip(w).map(|(xi, wi)| (self.at(xi), 0.5 * self.length * wi)).collect()
    }

    fn at(&self, xi: f64) -> [f64; 2] {
        let t = 0.5 * (1.0 + xi);
        [
            self.start[0] + t * (self.end[0] - self.start[0]),
            self.start[1] + t * (self.end[1] - self.start[1]),
        ]
    }
}

/// A rectangular smoothing cell owned by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingCell {
    pub id: usize,
    pub node: usize,
    /// Counterclockwise corners.
    pub vertices: [[f64; 2]; 4],
    pub centroid: [f64; 2],
    pub area: f64,
    pub edges: [Edge; 4],
}

impl SmoothingCell {
    fn new(id: usize, node: usize, r: [f64; 2], z: [f64; 2], sides: [Option<Side>; 4]) -> Self {
        let v = [[r[0], z[0]], [r[1], z[0]], [r[1], z[1]], [r[0], z[1]]];
        let normals = [[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let edges = std::array::from_fn(|k| {
            let (a, b) = (v[k], v[(k + 1) % 4]);
            Edge {
                start: a,
                end: b,
                normal: normals[k],
                length: ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt(),
                boundary: sides[k],
            }
        });
        Self {
            id,
            node,
            vertices: v,
            centroid: [0.5 * (r[0] + r[1]), 0.5 * (z[0] + z[1])],
            area: (r[1] - r[0]) * (z[1] - z[0]),
            edges,
        }
    }

    /// 2x2 Gauss points over the rectangle as `(point, weight)` pairs.
    pub fn domain_quadrature(&self) -> [([f64; 2], f64); 4] {
        let [lo, _, hi, _] = self.vertices;
        let (hr, hz) = (0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1]));
        let w = self.area / 4.0;
        let mut out = [([0.0; 2], w); 4];
        for (k, (a, b)) in [(0, 0), (1, 0), (1, 1), (0, 1)].into_iter().enumerate() {
            out[k].0 = [self.centroid[0] + hr * GAUSS2[a], self.centroid[1] + hz * GAUSS2[b]];
        }
        out
    }

    pub fn boundary_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.boundary.is_some())
    }
}

/// Conforming tiling of the domain rectangle by node-owned cells.
#[derive(Debug, Clone)]
pub struct CellPartition {
    pub r_range: [f64; 2],
    pub z_range: [f64; 2],
    /// Node positions along r and z. Node `(i, j)` has id `i * nz + j`.
    pub r_nodes: Vec<f64>,
    pub z_nodes: Vec<f64>,
    pub cells: Vec<SmoothingCell>,
    /// Pairs of cells sharing an edge.
    pub adjacency: Vec<(usize, usize)>,
}

impl CellPartition {
    pub fn nr(&self) -> usize {
        self.r_nodes.len()
    }

    pub fn nz(&self) -> usize {
        self.z_nodes.len()
    }

    pub fn node_id(&self, i: usize, j: usize) -> usize {
        i * self.nz() + j
    }

    pub fn node_coords(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.cells.len());
        for &r in &self.r_nodes {
            for &z in &self.z_nodes {
                out.push([r, z]);
            }
        }
        out
    }

    /// Node cloud on the partition's nodes with `a_I = factor * local spacing`.
    pub fn cloud(&self, factor: f64) -> Result<NodeCloud, RkError> {
        NodeCloud::from_grid(&self.r_nodes, &self.z_nodes, factor)
    }

    pub fn total_area(&self) -> f64 {
        self.cells.iter().map(|c| c.area).sum()
    }

    /// Node ids on one side of the domain.
    pub fn side_nodes(&self, side: Side) -> Vec<usize> {
        let (nr, nz) = (self.nr(), self.nz());
        match side {
            Side::Inner => (0..nz).map(|j| self.node_id(0, j)).collect(),
            Side::Outer => (0..nz).map(|j| self.node_id(nr - 1, j)).collect(),
            Side::Bottom => (0..nr).map(|i| self.node_id(i, 0)).collect(),
            Side::Top => (0..nr).map(|i| self.node_id(i, nz - 1)).collect(),
        }
    }

    pub fn is_boundary_node(&self, id: usize) -> bool {
        let (i, j) = (id / self.nz(), id % self.nz());
        i == 0 || j == 0 || i + 1 == self.nr() || j + 1 == self.nz()
    }
}

/// `n` node positions on `[a, b]` whose spacings grow by `ratio` away from `a`.
///
/// A single node sits at the midpoint.
pub fn graded_nodes(a: f64, b: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    let gaps = n - 1;
    let weights: Vec<f64> = (0..gaps).map(|k| ratio.powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut x = a;
    out.push(a);
    for w in &weights[..gaps - 1] {
        x += (b - a) * w / total;
        out.push(x);
    }
    out.push(b);
    out
}

fn cell_bounds(range: [f64; 2], nodes: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(nodes.len() + 1);
    out.push(range[0]);
    for w in nodes.windows(2) {
        out.push(0.5 * (w[0] + w[1]));
    }
    out.push(range[1]);
    out
}

/// Tiles `r_range x z_range` with `nr x nz` node-owned rectangular cells.
///
/// `grading` is the ratio between consecutive node spacings in r, with the
/// finest spacing at the inner radius.
pub fn build_rect_partition(
    r_range: [f64; 2],
    z_range: [f64; 2],
    nr: usize,
    nz: usize,
    grading: Option<f64>,
) -> Result<CellPartition, ScniError> {
    if nr == 0 || nz == 0 {
        return Err(ScniError::Degenerate(format!("{nr} x {nz} nodes")));
    }
    if !(r_range[0] > 0.0) || !(r_range[1] > r_range[0]) || !(z_range[1] > z_range[0]) {
        return Err(ScniError::Degenerate(format!(
            "r in [{}, {}], z in [{}, {}]",
            r_range[0], r_range[1], z_range[0], z_range[1]
        )));
    }
    let ratio = grading.unwrap_or(1.0);
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(ScniError::Degenerate(format!("grading ratio {ratio}")));
    }
    let r_nodes = graded_nodes(r_range[0], r_range[1], nr, ratio);
    let z_nodes = graded_nodes(z_range[0], z_range[1], nz, 1.0);
    let rb = cell_bounds(r_range, &r_nodes);
    let zb = cell_bounds(z_range, &z_nodes);

    let mut cells = Vec::with_capacity(nr * nz);
    let mut adjacency = Vec::new();
    for i in 0..nr {
        for j in 0..nz {
            let id = i * nz + j;
            let sides = [
                (j == 0).then_some(Side::Bottom),
                (i + 1 == nr).then_some(Side::Outer),
                (j + 1 == nz).then_some(Side::Top),
                (i == 0).then_some(Side::Inner),
            ];
            cells.push(SmoothingCell::new(id, id, [rb[i], rb[i + 1]], [zb[j], zb[j + 1]], sides));
            if i + 1 < nr {
                adjacency.push((id, id + nz));
            }
            if j + 1 < nz {
                adjacency.push((id, id + 1));
            }
        }
    }
    Ok(CellPartition {
        r_range,
        z_range,
        r_nodes,
        z_nodes,
        cells,
        adjacency,
    })
}

/// Gradient smoothing variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientForm {
    /// Plane smoothing `(1/W_L) ∮ Ψ n dΓ`, blind to the cylindrical measure.
    Cartesian,
    /// Smoothing in the `r dr dz` measure.
    Axisymmetric,
}

/// Per-cell shape data used by nodal integration.
#[derive(Debug, Clone, PartialEq)]
pub struct CellShapes {
    pub cell: usize,
    pub nodes: Vec<usize>,
    /// `Ψ_I(x_L)` at the centroid.
    pub value: Vec<f64>,
    /// Cell average `(1/W_L) ∫ Ψ_I dΩ`.
    pub mean: Vec<f64>,
    pub grad_r: Vec<f64>,
    pub grad_z: Vec<f64>,
    /// Shape factor multiplying `u_r` in the hoop strain.
    pub hoop: Vec<f64>,
}

impl CellShapes {
    pub fn at_centroid(&self, coeffs: &[f64]) -> f64 {
        dot(&self.nodes, &self.value, coeffs)
    }

    pub fn averaged(&self, coeffs: &[f64]) -> f64 {
        dot(&self.nodes, &self.mean, coeffs)
    }

    pub fn gradient(&self, coeffs: &[f64]) -> [f64; 2] {
        [dot(&self.nodes, &self.grad_r, coeffs), dot(&self.nodes, &self.grad_z, coeffs)]
    }
}

fn dot(nodes: &[usize], w: &[f64], coeffs: &[f64]) -> f64 {
    nodes.iter().zip(w).map(|(&i, v)| v * coeffs[i]).sum()
}

#[derive(Default, Clone, Copy)]
struct Acc {
    value: f64,
    domain: f64,
    edge_r: f64,
    edge_z: f64,
}

/// Smoothed gradients, centroid values and cell means for one cell.
pub fn smooth_cell(
    cell: &SmoothingCell,
    shapes: &impl ShapeEvaluator,
    form: GradientForm,
) -> Result<CellShapes, ScniError> {
    smooth_cell_with(cell, shapes, form, EDGE_POINTS)
}

/// [`smooth_cell`] with a chosen number of Gauss points per edge.
pub fn smooth_cell_with(
    cell: &SmoothingCell,
    shapes: &impl ShapeEvaluator,
    form: GradientForm,
    edge_points: usize,
) -> Result<CellShapes, ScniError> {
    let wrap = |source| ScniError::Shapes { cell: cell.id, source };
    let r_l = cell.centroid[0];
    if form == GradientForm::Axisymmetric && r_l <= 0.0 {
        return Err(ScniError::NonPositiveRadius { cell: cell.id, r: r_l });
    }
    let mut acc: BTreeMap<usize, Acc> = BTreeMap::new();

    let centroid = shapes.shapes_at(cell.centroid).map_err(wrap)?;
    for (&i, &v) in centroid.nodes.iter().zip(&centroid.values) {
        acc.entry(i).or_default().value = v;
    }
    for (p, w) in cell.domain_quadrature() {
        let set = shapes.shapes_at(p).map_err(wrap)?;
        for (&i, &v) in set.nodes.iter().zip(&set.values) {
            acc.entry(i).or_default().domain += v * w;
        }
    }
    for edge in &cell.edges {
        for (p, w) in edge.quadrature_n(edge_points) {
            let set = shapes.shapes_at(p).map_err(wrap)?;
            let measure = match form {
                GradientForm::Cartesian => w,
                GradientForm::Axisymmetric => w * p[0],
            };
            for (&i, &v) in set.nodes.iter().zip(&set.values) {
                let a = acc.entry(i).or_default();
                a.edge_r += v * edge.normal[0] * measure;
                a.edge_z += v * edge.normal[1] * measure;
            }
        }
    }

    let n = acc.len();
    let mut out = CellShapes {
        cell: cell.id,
        nodes: Vec::with_capacity(n),
        value: Vec::with_capacity(n),
        mean: Vec::with_capacity(n),
        grad_r: Vec::with_capacity(n),
        grad_z: Vec::with_capacity(n),
        hoop: Vec::with_capacity(n),
    };
    let w_l = cell.area;
    for (i, a) in acc {
        out.nodes.push(i);
        out.value.push(a.value);
        out.mean.push(a.domain / w_l);
        match form {
            GradientForm::Cartesian => {
                out.grad_r.push(a.edge_r / w_l);
                out.grad_z.push(a.edge_z / w_l);
                out.hoop.push(a.value / r_l);
            }
            GradientForm::Axisymmetric => {
                let scale = 1.0 / (r_l * w_l);
                out.grad_r.push((a.edge_r - a.domain) * scale);
                out.grad_z.push(a.edge_z * scale);
                out.hoop.push(a.domain / w_l / r_l);
            }
        }
    }
    Ok(out)
}

/// Per-node gradient pair `(node, [∂̃Ψ/∂r, ∂̃Ψ/∂z])`.
pub type NodalGradients = Vec<(usize, [f64; 2])>;

fn gradients_of(shapes: CellShapes) -> NodalGradients {
    shapes
        .nodes
        .into_iter()
        .zip(shapes.grad_r.into_iter().zip(shapes.grad_z))
        .map(|(i, (gr, gz))| (i, [gr, gz]))
        .collect()
}

/// `(1/W_L) ∮ Ψ_I n dΓ`.
pub fn smoothed_grad_cartesian(cell: &SmoothingCell, shapes: &impl ShapeEvaluator) -> Result<NodalGradients, ScniError> {
    smooth_cell(cell, shapes, GradientForm::Cartesian).map(gradients_of)
}

/// Smoothed gradients in the cylindrical measure:
/// `(1/(r_L W_L)) (∮ Ψ_I n_r r dΓ - ∫ Ψ_I dΩ)` and `(1/(r_L W_L)) ∮ Ψ_I n_z r dΓ`.
pub fn smoothed_grad_axisym(cell: &SmoothingCell, shapes: &impl ShapeEvaluator) -> Result<NodalGradients, ScniError> {
    smooth_cell(cell, shapes, GradientForm::Axisymmetric).map(gradients_of)
}

/// Smoothed shape data for every cell of a partition.
pub fn smooth_partition(
    partition: &CellPartition,
    shapes: &(impl ShapeEvaluator + Sync),
    form: GradientForm,
) -> Result<Vec<CellShapes>, ScniError> {
    use rayon::prelude::*;
    partition
        .cells
        .par_iter()
        .map(|c| smooth_cell(c, shapes, form))
        .collect()
}

/// Displacement field used by the patch test.
pub const PATCH_DISPLACEMENT: [f64; 2] = [0.1, 0.2];
/// Strains `(ε_rr, ε_zz, ε_θθ, γ_rz)` of the patch-test displacement.
pub const PATCH_STRAIN: [f64; 4] = [0.1, 0.2, 0.1, 0.0];

/// Strain errors for one gradient form.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PatchErrors {
    /// Largest strain deviation over cells after solving the elasticity problem.
    /// `None` when the partition is not node-owned, so no square system exists.
    pub solved_strain: Option<f64>,
    /// Largest nodal displacement deviation after solving.
    pub solved_displacement: Option<f64>,
    /// Largest strain deviation with the exact coefficients imposed at all nodes.
    pub imposed_strain: f64,
}

impl PatchErrors {
    /// The headline error: solved strains when available, else imposed.
    pub fn max_error(&self) -> f64 {
        self.solved_strain.unwrap_or(self.imposed_strain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PatchTestReport {
    pub axisymmetric: PatchErrors,
    pub cartesian: PatchErrors,
}

/// Isotropic elasticity used for the patch test.
const PATCH_YOUNG: f64 = 1.0;
const PATCH_POISSON: f64 = 0.3;

fn elasticity() -> Matrix4<f64> {
    let (e, nu) = (PATCH_YOUNG, PATCH_POISSON);
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    let l2 = lambda + 2.0 * mu;
    Matrix4::new(
        l2, lambda, lambda, 0.0, //
        lambda, l2, lambda, 0.0, //
        lambda, lambda, l2, 0.0, //
        0.0, 0.0, 0.0, mu,
    )
}

fn cell_strain(s: &CellShapes, ur: &[f64], uz: &[f64]) -> [f64; 4] {
    let mut e = [0.0; 4];
    for (k, &i) in s.nodes.iter().enumerate() {
        e[0] += s.grad_r[k] * ur[i];
        e[1] += s.grad_z[k] * uz[i];
        e[2] += s.hoop[k] * ur[i];
        e[3] += s.grad_z[k] * ur[i] + s.grad_r[k] * uz[i];
    }
    e
}

fn strain_error(cells: &[CellShapes], ur: &[f64], uz: &[f64]) -> f64 {
    cells
        .iter()
        .map(|s| {
            let e = cell_strain(s, ur, uz);
            (0..4).map(|k| (e[k] - PATCH_STRAIN[k]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Axisymmetric linear patch test with `u_r = 0.1 r`, `u_z = 0.2 z`.
///
/// Imposing exact nodal coefficients checks strain reproduction of each form.
/// When every cell is owned by one node, the elasticity problem is also solved
/// with exact boundary tractions on all edges and boundary-node collocation, so
/// a form that is not consistent with the cylindrical measure shows up as a
/// wrong solution.
pub fn patch_test(partition: &CellPartition, cloud: &NodeCloud, spec: BasisSpec) -> Result<PatchTestReport, ScniError> {
    let approx = RkApproximation::new(cloud, spec);
    let run = |form| -> Result<PatchErrors, ScniError> {
        let cells = smooth_partition(partition, &approx, form)?;
        let ur: Vec<f64> = cloud.coords().iter().map(|c| PATCH_DISPLACEMENT[0] * c[0]).collect();
        let uz: Vec<f64> = cloud.coords().iter().map(|c| PATCH_DISPLACEMENT[1] * c[1]).collect();
        let imposed_strain = strain_error(&cells, &ur, &uz);
        let node_owned = partition.cells.len() == cloud.len() && cloud.len() >= 9;
        if !node_owned {
            return Ok(PatchErrors {
                solved_strain: None,
                solved_displacement: None,
                imposed_strain,
            });
        }
        let (sr, sz) = solve_patch(partition, &approx, &cells)?;
        let disp = ur
            .iter()
            .zip(&sr)
            .chain(uz.iter().zip(&sz))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(PatchErrors {
            solved_strain: Some(strain_error(&cells, &sr, &sz)),
            solved_displacement: Some(disp),
            imposed_strain,
        })
    };
    Ok(PatchTestReport {
        axisymmetric: run(GradientForm::Axisymmetric)?,
        cartesian: run(GradientForm::Cartesian)?,
    })
}

fn solve_patch(
    partition: &CellPartition,
    approx: &RkApproximation<'_>,
    cells: &[CellShapes],
) -> Result<(Vec<f64>, Vec<f64>), ScniError> {
    let n = approx.cloud.len();
    let d = elasticity();
    let mut k = DMatrix::<f64>::zeros(2 * n, 2 * n);
    let mut f = DVector::<f64>::zeros(2 * n);

    for (cell, s) in partition.cells.iter().zip(cells) {
        let w = cell.centroid[0] * cell.area;
        // B columns for (u_r, u_z) of each node: rows ε_rr, ε_zz, ε_θθ, γ_rz
        let cols: Vec<_> = (0..s.nodes.len())
            .map(|a| {
                (
                    nalgebra::Vector4::new(s.grad_r[a], 0.0, s.hoop[a], s.grad_z[a]),
                    nalgebra::Vector4::new(0.0, s.grad_z[a], 0.0, s.grad_r[a]),
                )
            })
            .collect();
        for (a, &i) in s.nodes.iter().enumerate() {
            let (bri, bzi) = (d * cols[a].0 * w, d * cols[a].1 * w);
            for (b, &j) in s.nodes.iter().enumerate() {
                let (brj, bzj) = cols[b];
                k[(i, j)] += bri.dot(&brj);
                k[(i, n + j)] += bri.dot(&bzj);
                k[(n + i, j)] += bzi.dot(&brj);
                k[(n + i, n + j)] += bzi.dot(&bzj);
            }
        }
        let eps = nalgebra::Vector4::from(PATCH_STRAIN);
        let sigma = d * eps;
        for edge in cell.boundary_edges() {
            let t = [
                sigma[0] * edge.normal[0] + sigma[3] * edge.normal[1],
                sigma[3] * edge.normal[0] + sigma[1] * edge.normal[1],
            ];
            for (p, wq) in edge.quadrature() {
                let set = approx
                    .shapes_at(p)
                    .map_err(|source| ScniError::Shapes { cell: cell.id, source })?;
                for (&i, &v) in set.nodes.iter().zip(&set.values) {
                    f[i] += v * t[0] * p[0] * wq;
                    f[n + i] += v * t[1] * p[0] * wq;
                }
            }
        }
    }

    for id in 0..n {
        if !partition.is_boundary_node(id) {
            continue;
        }
        let x = approx.cloud.coord(id);
        let set = approx
            .shapes_at(x)
            .map_err(|source| ScniError::Shapes { cell: id, source })?;
        for row in [id, n + id] {
            k.row_mut(row).fill(0.0);
        }
        for (&j, &v) in set.nodes.iter().zip(&set.values) {
            k[(id, j)] = v;
            k[(n + id, n + j)] = v;
        }
        f[id] = PATCH_DISPLACEMENT[0] * x[0];
        f[n + id] = PATCH_DISPLACEMENT[1] * x[1];
    }

    let u = k.lu().solve(&f).ok_or(ScniError::SingularSystem)?;
    Ok((u.rows(0, n).iter().copied().collect(), u.rows(n, n).iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rk::DEFAULT_SUPPORT_FACTOR;

    fn unit_partition(n: usize) -> CellPartition {
        build_rect_partition([1.0, 2.0], [0.0, 1.0], n, n, None).unwrap()
    }

    #[test]
    fn unit_square_two_by_two() {
        let p = build_rect_partition([1.0, 2.0], [0.0, 1.0], 2, 2, None).unwrap();
        assert_eq!(p.cells.len(), 4);
        for c in &p.cells {
            assert!((c.area - 0.25).abs() < 1e-15);
        }
        assert!((p.total_area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_ranges() {
        assert!(build_rect_partition([0.0, 1.0], [0.0, 1.0], 2, 2, None).is_err());
        assert!(build_rect_partition([1.0, 1.0], [0.0, 1.0], 2, 2, None).is_err());
        assert!(build_rect_partition([1.0, 2.0], [0.0, 1.0], 0, 2, None).is_err());
    }

    #[test]
    fn interior_edges_are_shared_by_two_cells() {
        let p = build_rect_partition([0.5, 2.0], [0.0, 1.0], 5, 4, Some(1.3)).unwrap();
        let key = |e: &Edge| {
            let (a, b) = if (e.start[0], e.start[1]) < (e.end[0], e.end[1]) {
                (e.start, e.end)
            } else {
                (e.end, e.start)
            };
            [a[0].to_bits(), a[1].to_bits(), b[0].to_bits(), b[1].to_bits()]
        };
        let mut count = std::collections::HashMap::new();
        for c in &p.cells {
            for e in &c.edges {
                *count.entry(key(e)).or_insert(0) += 1;
                let closure: [f64; 2] = c.edges.iter().fold([0.0, 0.0], |s, e| {
                    [s[0] + e.normal[0] * e.length, s[1] + e.normal[1] * e.length]
                });
                assert!(closure[0].abs() < 1e-15 && closure[1].abs() < 1e-15);
            }
        }
        for c in &p.cells {
            for e in &c.edges {
                let expected = if e.boundary.is_some() { 1 } else { 2 };
                assert_eq!(count[&key(e)], expected);
            }
        }
        assert_eq!(p.adjacency.len(), 4 * 4 + 5 * 3);
    }

    #[test]
    fn graded_widths_are_geometric() {
        let ratio = 1.2;
        let p = build_rect_partition([0.1, 3.1], [0.0, 1.0], 9, 1, Some(ratio)).unwrap();
        let widths: Vec<f64> = p.cells.iter().map(|c| c.vertices[1][0] - c.vertices[0][0]).collect();
        // interior dual widths are means of consecutive gaps, which stay geometric
        for w in widths[1..widths.len() - 1].windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
        let gaps: Vec<f64> = p.r_nodes.windows(2).map(|w| w[1] - w[0]).collect();
        for g in gaps.windows(2) {
            assert!((g[1] / g[0] - ratio).abs() < 1e-12);
        }
        assert!((p.total_area() - 3.0).abs() <= 1e-12 * 3.0);
    }

    #[test]
    fn single_node_partition_is_centered() {
        let p = build_rect_partition([1.0, 2.0], [0.0, 1.0], 1, 1, None).unwrap();
        assert_eq!(p.cells.len(), 1);
        assert_eq!(p.cells[0].centroid, [1.5, 0.5]);
        assert_eq!(p.r_nodes, vec![1.5]);
    }

    #[test]
    fn linear_fields_are_smoothed_exactly() {
        let p = unit_partition(6);
        let cloud = p.cloud(DEFAULT_SUPPORT_FACTOR).unwrap();
        let approx = RkApproximation::new(&cloud, BasisSpec::LINEAR);
        let ones = vec![1.0; cloud.len()];
        let r: Vec<f64> = cloud.coords().iter().map(|c| c[0]).collect();
        let z: Vec<f64> = cloud.coords().iter().map(|c| c[1]).collect();
        for form in [GradientForm::Cartesian, GradientForm::Axisymmetric] {
            for cell in &p.cells {
                let s = smooth_cell(cell, &approx, form).unwrap();
                let g1 = s.gradient(&ones);
                assert!(g1[0].abs() < 1e-12 && g1[1].abs() < 1e-12);
                let gr = s.gradient(&r);
                assert!((gr[0] - 1.0).abs() < 1e-10 && gr[1].abs() < 1e-10);
                let gz = s.gradient(&z);
                assert!(gz[0].abs() < 1e-10 && (gz[1] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cartesian_smoothing_matches_dense_domain_quadrature() {
        let p = unit_partition(5);
        let cloud = p.cloud(DEFAULT_SUPPORT_FACTOR).unwrap();
        let approx = RkApproximation::new(&cloud, BasisSpec::LINEAR);
        let (x8, w8) = gauss_legendre_8();
        for cell in &p.cells {
            let s = smooth_cell_with(cell, &approx, GradientForm::Cartesian, 16).unwrap();
            let grads = gradients_of(s);
            let [lo, _, hi, _] = cell.vertices;
            // composite 8x8 Gauss on 4x4 sub-rectangles, since kernel knots cross the cell
            let sub = 4;
            let qr = 0.5 * (hi[0] - lo[0]) / sub as f64;
            let qz = 0.5 * (hi[1] - lo[1]) / sub as f64;
            let mut dense: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
            for q in 0..sub * sub {
                let (sr, sz) = ((q / sub) as f64, (q % sub) as f64);
                for k in 0..64 {
                    let (a, b) = (k / 8, k % 8);
                    let pt = [
                        lo[0] + qr * (2.0 * sr + 1.0 + x8[a]),
                        lo[1] + qz * (2.0 * sz + 1.0 + x8[b]),
                    ];
                    let w = w8[a] * w8[b] * qr * qz / cell.area;
                    let set = approx.shapes_at(pt).unwrap();
                    for (k, &i) in set.nodes.iter().enumerate() {
                        let e = dense.entry(i).or_default();
                        e[0] += set.grad_r[k] * w;
                        e[1] += set.grad_z[k] * w;
                    }
                }
            }
            let scale = grads.iter().fold(1.0f64, |m, (_, g)| m.max(g[0].abs()).max(g[1].abs()));
            for (i, g) in grads {
                let d = dense.get(&i).copied().unwrap_or_default();
                assert!((g[0] - d[0]).abs() < 1e-6 * scale, "node {i}: {} vs {}", g[0], d[0]);
                assert!((g[1] - d[1]).abs() < 1e-6 * scale, "node {i}: {} vs {}", g[1], d[1]);
            }
        }
    }

    fn gauss_legendre_8() -> ([f64; 8], [f64; 8]) {
        let x = [
            -0.960_289_856_497_536_3,
            -0.796_666_477_413_626_7,
            -0.525_532_409_916_329,
            -0.183_434_642_495_649_8,
            0.183_434_642_495_649_8,
            0.525_532_409_916_329,
            0.796_666_477_413_626_7,
            0.960_289_856_497_536_3,
        ];
        let w = [
            0.101_228_536_290_376_3,
            0.222_381_034_453_374_5,
            0.313_706_645_877_887_3,
            0.362_683_783_378_362,
            0.362_683_783_378_362,
            0.313_706_645_877_887_3,
            0.222_381_034_453_374_5,
            0.101_228_536_290_376_3,
        ];
        (x, w)
    }

    #[test]
    fn generated_gauss_rules_match_tables() {
        let (x, w) = gauss_legendre(8);
        let (xt, wt) = gauss_legendre_8();
        for k in 0..8 {
            assert!((x[k] - xt[k]).abs() < 1e-15 && (w[k] - wt[k]).abs() < 1e-15);
        }
        let (x2, w2) = gauss_legendre(2);
        assert!((x2[1] - GAUSS2[1]).abs() < 1e-15 && (w2[0] - 1.0).abs() < 1e-15);
        let (x1, w1) = gauss_legendre(1);
        assert_eq!((x1[0], w1[0]), (0.0, 2.0));
    }

    #[test]
    fn axisymmetric_patch_is_exact_and_cartesian_is_not() {
        let p = build_rect_partition([0.1, 1.1], [0.0, 1.0], 6, 6, None).unwrap();
        let cloud = p.cloud(DEFAULT_SUPPORT_FACTOR).unwrap();
        let report = patch_test(&p, &cloud, BasisSpec::LINEAR).unwrap();
        assert!(report.axisymmetric.max_error() <= 1e-10, "{report:?}");
        assert!(report.axisymmetric.imposed_strain <= 1e-10);
        assert!(report.cartesian.max_error() >= 1e-3, "{report:?}");
    }

    #[test]
    fn single_cell_patch_is_exact() {
        let p = build_rect_partition([0.1, 1.1], [0.0, 1.0], 1, 1, None).unwrap();
        let cloud = NodeCloud::from_grid(&graded_nodes(0.1, 1.1, 4, 1.0), &graded_nodes(0.0, 1.0, 4, 1.0), DEFAULT_SUPPORT_FACTOR).unwrap();
        let report = patch_test(&p, &cloud, BasisSpec::LINEAR).unwrap();
        assert!(report.axisymmetric.max_error() <= 1e-10);
    }

    #[test]
    fn summed_gradient_rows_reduce_to_boundary_integrals() {
        let p = build_rect_partition([0.2, 1.2], [0.0, 0.8], 5, 4, Some(1.1)).unwrap();
        let cloud = p.cloud(DEFAULT_SUPPORT_FACTOR).unwrap();
        let approx = RkApproximation::new(&cloud, BasisSpec::ENRICHED);
        let cells = smooth_partition(&p, &approx, GradientForm::Axisymmetric).unwrap();
        let n = cloud.len();
        let mut lhs = vec![[0.0; 2]; n];
        for (cell, s) in p.cells.iter().zip(&cells) {
            let w = cell.centroid[0] * cell.area;
            for (k, &i) in s.nodes.iter().enumerate() {
                lhs[i][0] += s.grad_r[k] * w + s.mean[k] * cell.area;
                lhs[i][1] += s.grad_z[k] * w;
            }
        }
        let mut rhs = vec![[0.0; 2]; n];
        for cell in &p.cells {
            for e in cell.boundary_edges() {
                for (pt, w) in e.quadrature() {
                    let set = approx.shapes_at(pt).unwrap();
                    for (&i, &v) in set.nodes.iter().zip(&set.values) {
                        rhs[i][0] += v * e.normal[0] * pt[0] * w;
                        rhs[i][1] += v * e.normal[1] * pt[0] * w;
                    }
                }
            }
        }
        for i in 0..n {
            assert!((lhs[i][0] - rhs[i][0]).abs() < 1e-12);
            assert!((lhs[i][1] - rhs[i][1]).abs() < 1e-12);
        }
    }
}
