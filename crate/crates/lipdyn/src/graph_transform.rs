//! Invariant manifolds as fixed points of the graph transform.
//!
//! A map is handled through its [`SplitSystem`]: the centred map
//! `S(x) = T(x* + x) - T(x*)` read in the coordinates of a spectral split,
//! so that `S = L + N` with `L = diag(L_u, L_s)`. Graphs live on regular
//! grids over a box in the domain subspace and are evaluated by multilinear
//! interpolation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral_split::{canonical_norm, split_spectrum, AdaptedNorm, SplitError, SplitLinearMap};

pub type VecMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Largest domain dimension for gridded graphs.
pub const MAX_GRID_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("no spectral gap at rho = {rho}: need b = {b} < rho < a = {a}")]
    NoSpectralGapAtRho { a: f64, b: f64, rho: f64 },
    #[error("smallness violated: need Lip(N) < {required}, have {actual}")]
    SmallnessViolated { required: f64, actual: f64 },
    #[error("graph transform did not converge in {sweeps} sweeps (last difference {last_diff:e})")]
    NotConverged { sweeps: usize, last_diff: f64 },
    #[error("fixed-point iteration failed after {iterations} iterations (residual {residual:e})")]
    ContractionFailed { iterations: usize, residual: f64 },
    #[error("graph domain dimension {0} is not supported (must be 1..=3)")]
    UnsupportedDimension(usize),
    #[error("grid needs an odd node count >= 3 and positive radius")]
    BadGrid,
    #[error(transparent)]
    Split(#[from] SplitError),
}

/// Axis-aligned box.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        DomainBox {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo.len() != self.hi.len() || self.lo.iter().zip(&self.hi).any(|(l, h)| !(h > l))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Black-box map with optional derivative and Lipschitz data.
#[derive(Clone)]
pub struct MapModel {
    pub evaluator: VecMap,
    pub domain_box: DomainBox,
    pub fixed_point_hint: Option<DVector<f64>>,
    /// Analytic Lipschitz constant of the nonlinear part, if known.
    pub lip_data: Option<f64>,
    pub jacobian: Option<JacMap>,
}

impl MapModel {
    pub fn new(
        evaluator: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        domain_box: DomainBox,
    ) -> Self {
        MapModel {
            evaluator: Arc::new(evaluator),
            domain_box,
            fixed_point_hint: None,
            lip_data: None,
            jacobian: None,
        }
    }

    pub fn with_lip(mut self, lip: f64) -> Self {
        self.lip_data = Some(lip);
        self
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_fixed_point_hint(mut self, x: DVector<f64>) -> Self {
        self.fixed_point_hint = Some(x);
        self
    }

    pub fn dim(&self) -> usize {
        self.domain_box.lo.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.evaluator)(x)
    }

    /// Analytic Jacobian if supplied, else central differences.
    pub fn jacobian_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = &self.jacobian {
            return j(x);
        }
        finite_difference_jacobian(&*self.evaluator, x, 1e-6)
    }
}

pub fn finite_difference_jacobian(
    f: &(dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync),
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let d = x.len();
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let step = h * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        cols.push((f(&xp) - f(&xm)) / (2.0 * step));
    }
    DMatrix::from_columns(&cols)
}

/// Radial retraction onto the closed ball of radius `r` in the adapted norm.
pub fn radial_retraction(z: &DVector<f64>, norm: &AdaptedNorm, r: f64) -> DVector<f64> {
    let nz = norm.norm_coords(z);
    if nz > r {
        z * (r / nz)
    } else {
        z.clone()
    }
}

/// Extension `N(r x/|x|)` outside the ball of radius `r`; identical inside.
/// Doubles the Lipschitz constant at most, and bounds `sup |Ñ|` by `Lip(N) r`.
pub fn extend_lipschitz<F>(
    n_map: F,
    norm: AdaptedNorm,
    r: f64,
) -> impl Fn(&DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    move |z| n_map(&radial_retraction(z, &norm, r))
}

/// The centred map `S = L + N` of an equilibrium, read in split coordinates.
#[derive(Clone)]
pub struct SplitSystem {
    pub split: SplitLinearMap,
    pub norm: AdaptedNorm,
    /// Ambient equilibrium the system is centred at.
    pub base_point: DVector<f64>,
    /// Lipschitz constant of `N` on the working set (before any extension).
    pub gamma: f64,
    /// If set, `N` is replaced by its radial extension beyond this radius.
    pub extension_radius: Option<f64>,
    centered: VecMap,
    lin: DMatrix<f64>,
}

impl std::fmt::Debug for SplitSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SplitSystem")
            .field("dims", &(self.dim_u(), self.dim_s()))
            .field("a", &self.split.a)
            .field("b", &self.split.b)
            .field("gamma", &self.gamma)
            .field("extension_radius", &self.extension_radius)
            .finish_non_exhaustive()
    }
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = (a.nrows(), b.nrows());
    let mut m = DMatrix::zeros(p + q, p + q);
    m.view_mut((0, 0), (p, p)).copy_from(a);
    m.view_mut((p, p), (q, q)).copy_from(b);
    m
}

impl SplitSystem {
    /// `centered` must be the ambient map `x ↦ T(x* + x) - T(x*)`.
    pub fn new(
        centered: VecMap,
        split: SplitLinearMap,
        norm: AdaptedNorm,
        base_point: DVector<f64>,
        gamma: f64,
    ) -> Self {
        let lin = block_diag(&split.l_u, &split.l_s);
        SplitSystem {
            split,
            norm,
            base_point,
            gamma,
            extension_radius: None,
            centered,
            lin,
        }
    }

    /// Centres `model` at `x_star`, with `L` taken from the given split.
    pub fn from_model(
        model: &MapModel,
        x_star: &DVector<f64>,
        split: SplitLinearMap,
        norm: AdaptedNorm,
        gamma: f64,
    ) -> Self {
        let f = model.evaluator.clone();
        let base = x_star.clone();
        let t_star = f(x_star);
        let centered: VecMap = Arc::new(move |x: &DVector<f64>| f(&(&base + x)) - &t_star);
        SplitSystem::new(centered, split, norm, x_star.clone(), gamma)
    }

    /// Linearises `model` at `x_star`, splits at `rho` and uses the canonical norm.
    pub fn linearize(
        model: &MapModel,
        x_star: &DVector<f64>,
        rho: f64,
        gamma: f64,
    ) -> Result<Self, GraphError> {
        let split = split_spectrum(&model.jacobian_at(x_star), rho)?;
        let norm = canonical_norm(&split)?;
        Ok(SplitSystem::from_model(model, x_star, split, norm, gamma))
    }

    /// A map given directly in the split coordinates of `self` (centred, so
    /// `map(0) = 0`), sharing its splitting and norm.
    pub fn in_coordinates(&self, map: VecMap, gamma: f64) -> Self {
        SplitSystem::new(
            map,
            self.split.coordinate_form(),
            self.norm.coordinate_form(),
            DVector::zeros(self.dim()),
            gamma,
        )
    }

    /// Same map, with `N` radially extended beyond radius `r`.
    pub fn extended(&self, r: f64) -> Self {
        let mut s = self.clone();
        s.extension_radius = Some(r);
        s
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut s = self.clone();
        s.gamma = gamma;
        s
    }

    /// Same map split at a different radius (canonical norm).
    pub fn resplit(&self, rho: f64) -> Result<Self, GraphError> {
        let split = split_spectrum(&self.split.matrix, rho)?;
        let norm = canonical_norm(&split)?;
        let mut s = SplitSystem::new(self.centered.clone(), split, norm, self.base_point.clone(), self.gamma);
        s.extension_radius = self.extension_radius;
        Ok(s)
    }

    pub fn centered_map(&self) -> VecMap {
        self.centered.clone()
    }

    pub fn dim(&self) -> usize {
        self.split.dim()
    }

    pub fn dim_u(&self) -> usize {
        self.split.dim_u()
    }

    pub fn dim_s(&self) -> usize {
        self.split.dim_s()
    }

    pub fn a(&self) -> f64 {
        self.split.a
    }

    pub fn b(&self) -> f64 {
        self.split.b
    }

    pub fn rho(&self) -> f64 {
        self.split.rho
    }

    /// Lipschitz constant of the nonlinearity actually iterated.
    pub fn gamma_eff(&self) -> f64 {
        if self.extension_radius.is_some() {
            2.0 * self.gamma
        } else {
            self.gamma
        }
    }

    pub fn linear(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.lin * z
    }

    /// `S` in split coordinates without extension.
    pub fn s_raw(&self, z: &DVector<f64>) -> DVector<f64> {
        let x = self.split.from_coords(z);
        self.split.to_coords(&(self.centered)(&x))
    }

    /// `N = S - L` in split coordinates, extended if requested.
    pub fn nonlinear(&self, z: &DVector<f64>) -> DVector<f64> {
        match self.extension_radius {
            Some(r) => {
                let zr = radial_retraction(z, &self.norm, r);
                self.s_raw(&zr) - self.linear(&zr)
            }
            None => self.s_raw(z) - self.linear(z),
        }
    }

    /// `S = L + N` in split coordinates, extended if requested.
    pub fn s(&self, z: &DVector<f64>) -> DVector<f64> {
        match self.extension_radius {
            Some(_) => self.linear(z) + self.nonlinear(z),
            None => self.s_raw(z),
        }
    }

    pub fn norm_coords(&self, z: &DVector<f64>) -> f64 {
        self.norm.norm_coords(z)
    }

    pub fn stack(&self, xi: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, self.dim_u()).copy_from(xi);
        z.rows_mut(self.dim_u(), self.dim_s()).copy_from(eta);
        z
    }

    pub fn unstack(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            z.rows(0, self.dim_u()).into_owned(),
            z.rows(self.dim_u(), self.dim_s()).into_owned(),
        )
    }

    /// Ambient point `x* + V z`.
    pub fn to_ambient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.base_point + self.split.from_coords(z)
    }

    /// Split coordinates of an ambient point relative to the base point.
    pub fn to_coords(&self, x: &DVector<f64>) -> DVector<f64> {
        self.split.to_coords(&(x - &self.base_point))
    }

    /// Preimage under `S` by iterating `z = L^{-1}(y - N(z))`; needs `L_s` invertible.
    pub fn invert(&self, y: &DVector<f64>, fp: &FixedPointParams) -> Result<DVector<f64>, GraphError> {
        let lin_inv = self
            .lin
            .clone()
            .try_inverse()
            .ok_or(GraphError::ContractionFailed { iterations: 0, residual: f64::INFINITY })?;
        let mut z = &lin_inv * y;
        let mut prev = f64::INFINITY;
        for k in 0..fp.max_iter {
            let next = &lin_inv * (y - self.nonlinear(&z));
            let res = self.norm_coords(&(&next - &z));
            z = next;
            if res <= fp.tol * (1.0 + self.norm_coords(&z)) {
                return Ok(z);
            }
            if (k >= 2 && res > 2.0 * prev) || !res.is_finite() {
                return Err(GraphError::ContractionFailed { iterations: k + 1, residual: res });
            }
            prev = res;
        }
        Err(GraphError::ContractionFailed { iterations: fp.max_iter, residual: prev })
    }
}

/// Picard iteration controls.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointParams {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointParams {
    fn default() -> Self {
        FixedPointParams { tol: 1e-12, max_iter: 200 }
    }
}

/// Regular grid over `[-radius, radius]^dim` with an odd node count per axis,
/// so that the origin is a node.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Grid {
    pub dim: usize,
    pub radius: f64,
    pub nodes_per_axis: usize,
}

impl Grid {
    pub fn new(dim: usize, radius: f64, nodes_per_axis: usize) -> Result<Self, GraphError> {
        if dim == 0 || dim > MAX_GRID_DIM {
            return Err(GraphError::UnsupportedDimension(dim));
        }
        if nodes_per_axis < 3 || nodes_per_axis % 2 == 0 || !(radius > 0.0) || !radius.is_finite() {
            return Err(GraphError::BadGrid);
        }
        Ok(Grid { dim, radius, nodes_per_axis })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / (self.nodes_per_axis - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.nodes_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn origin_index(&self) -> usize {
        let mid = self.nodes_per_axis / 2;
        (0..self.dim).map(|k| mid * self.nodes_per_axis.pow(k as u32)).sum()
    }

    fn axis_coord(&self, i: usize) -> f64 {
        -self.radius + i as f64 * self.spacing()
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let n = self.nodes_per_axis;
        let mut rest = idx;
        (0..self.dim)
            .map(|_| {
                let i = rest % n;
                rest /= n;
                i
            })
            .collect()
    }

    pub fn node(&self, idx: usize) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.multi_index(idx).into_iter().map(|i| self.axis_coord(i)))
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        p.iter().all(|v| v.abs() <= self.radius * (1.0 + 1e-12))
    }

    /// Pairs of neighbouring nodes along each axis.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.nodes_per_axis;
        let mut out = Vec::new();
        for idx in 0..self.len() {
            let mi = self.multi_index(idx);
            for (k, &i) in mi.iter().enumerate() {
                if i + 1 < n {
                    out.push((idx, idx + n.pow(k as u32)));
                }
            }
        }
        out
    }

    /// Multilinear interpolation of nodal vectors (stride `codim`); points outside
    /// the box are clamped onto it.
    pub fn interpolate(&self, values: &[f64], codim: usize, p: &DVector<f64>) -> DVector<f64> {
        let n = self.nodes_per_axis;
        let h = self.spacing();
        let mut base = [0usize; MAX_GRID_DIM];
        let mut frac = [0.0f64; MAX_GRID_DIM];
        for k in 0..self.dim {
            let t = ((p[k].clamp(-self.radius, self.radius) + self.radius) / h).max(0.0);
            let i = (t.floor() as usize).min(n - 2);
            base[k] = i;
            frac[k] = (t - i as f64).clamp(0.0, 1.0);
        }
        let mut out = DVector::zeros(codim);
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut idx = 0;
            let mut stride = 1;
            for k in 0..self.dim {
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                idx += (base[k] + bit) * stride;
                stride *= n;
            }
            if w != 0.0 {
                let v = &values[idx * codim..(idx + 1) * codim];
                for c in 0..codim {
                    out[c] += w * v[c];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Graph over `X_u` with values in `X_s`.
    Unstable,
    /// Graph over `X_s` with values in `X_u`.
    Stable,
}

/// Convergence record of a graph-transform run.
#[derive(Debug, Clone, Serialize, Default)]
pub struct GraphDiagnostics {
    pub sweeps: usize,
    /// Largest sweep-to-sweep ratio of the weighted metric `sup |Δ(ξ)|/|ξ|`.
    pub contraction_factor: f64,
    /// Predicted contraction `(b+2γ)/(a-2γ)`.
    pub contraction_bound: f64,
    /// Predicted Lipschitz bound `γ/(a-b-3γ)`.
    pub lip_bound: f64,
    pub final_sup_diff: f64,
    pub metric_history: Vec<f64>,
    /// Every step kept `Lip(θ*) <= (b+2γ)/(a-2γ)` when `Lip(θ) <= 1`.
    pub step_lip_ok: bool,
    pub gamma: f64,
}

/// Gridded Lipschitz graph, the representation of an invariant manifold.
#[derive(Debug, Clone, Serialize)]
pub struct LipschitzGraph {
    pub base_point: Vec<f64>,
    pub direction: Direction,
    pub radius: f64,
    pub grid: Grid,
    pub codim: usize,
    /// Nodal values, `codim` entries per node in grid order.
    pub values: Vec<f64>,
    pub lip_cert: f64,
    pub rho: f64,
    pub diagnostics: GraphDiagnostics,
}

impl LipschitzGraph {
    pub fn zero(grid: Grid, codim: usize, direction: Direction, base_point: Vec<f64>, rho: f64) -> Self {
        LipschitzGraph {
            base_point,
            direction,
            radius: grid.radius,
            values: vec![0.0; grid.len() * codim],
            grid,
            codim,
            lip_cert: 0.0,
            rho,
            diagnostics: GraphDiagnostics::default(),
        }
    }

    /// Samples `f` at the grid nodes; `lip_cert` is measured in Euclidean norms.
    pub fn from_fn(
        grid: Grid,
        codim: usize,
        direction: Direction,
        f: impl Fn(&DVector<f64>) -> DVector<f64>,
    ) -> Self {
        let mut g = LipschitzGraph::zero(grid, codim, direction, Vec::new(), 1.0);
        for i in 0..g.grid.len() {
            let v = f(&g.grid.node(i));
            g.values[i * codim..(i + 1) * codim].copy_from_slice(v.as_slice());
        }
        g.lip_cert = g.measure_lip(&|v| v.norm(), &|v| v.norm());
        g
    }

    pub fn dim_domain(&self) -> usize {
        self.grid.dim
    }

    pub fn eval(&self, p: &DVector<f64>) -> DVector<f64> {
        self.grid.interpolate(&self.values, self.codim, p)
    }

    pub fn node_value(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.values[i * self.codim..(i + 1) * self.codim])
    }

    pub fn origin_value(&self) -> DVector<f64> {
        self.node_value(self.grid.origin_index())
    }

    /// Largest difference quotient over neighbouring nodes.
    pub fn measure_lip(
        &self,
        dom: &dyn Fn(&DVector<f64>) -> f64,
        cod: &dyn Fn(&DVector<f64>) -> f64,
    ) -> f64 {
        self.grid
            .edges()
            .into_iter()
            .map(|(i, j)| {
                let dx = dom(&(self.grid.node(j) - self.grid.node(i)));
                cod(&(self.node_value(j) - self.node_value(i))) / dx
            })
            .fold(0.0, f64::max)
    }

    /// Largest nodal difference, `cod` norm.
    pub fn sup_distance(&self, other: &LipschitzGraph, cod: &dyn Fn(&DVector<f64>) -> f64) -> f64 {
        (0..self.grid.len())
            .map(|i| cod(&(self.node_value(i) - other.node_value(i))))
            .fold(0.0, f64::max)
    }

    /// Weighted metric `sup_{ξ≠0} |θ(ξ) - τ(ξ)| / |ξ|` over the nodes.
    pub fn weighted_distance(
        &self,
        other: &LipschitzGraph,
        dom: &dyn Fn(&DVector<f64>) -> f64,
        cod: &dyn Fn(&DVector<f64>) -> f64,
    ) -> f64 {
        let o = self.grid.origin_index();
        (0..self.grid.len())
            .filter(|&i| i != o)
            .map(|i| cod(&(self.node_value(i) - other.node_value(i))) / dom(&self.grid.node(i)))
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self, cod: &dyn Fn(&DVector<f64>) -> f64) -> f64 {
        (0..self.grid.len()).map(|i| cod(&self.node_value(i))).fold(0.0, f64::max)
    }
}

/// Domain and codomain norms of a graph direction.
pub fn graph_norms(
    norm: &AdaptedNorm,
    direction: Direction,
) -> (impl Fn(&DVector<f64>) -> f64 + '_, impl Fn(&DVector<f64>) -> f64 + '_) {
    let dom = move |v: &DVector<f64>| match direction {
        Direction::Unstable => norm.norm_u(v),
        Direction::Stable => norm.norm_s(v),
    };
    let cod = move |v: &DVector<f64>| match direction {
        Direction::Unstable => norm.norm_s(v),
        Direction::Stable => norm.norm_u(v),
    };
    (dom, cod)
}

/// Solves `ξ = L_u^{-1}(ξ̂ - N_u(ξ + θ(ξ)))` by Picard iteration from `L_u^{-1} ξ̂`.
pub fn solve_preimage(
    graph: &LipschitzGraph,
    target_xi: &DVector<f64>,
    sys: &SplitSystem,
    fp: &FixedPointParams,
) -> Result<DVector<f64>, GraphError> {
    let lu_inv = &sys.split.l_u_inv;
    let du = sys.dim_u();
    let mut xi = lu_inv * target_xi;
    let mut prev = f64::INFINITY;
    for k in 0..fp.max_iter {
        let z = sys.stack(&xi, &graph.eval(&xi));
        let n = sys.nonlinear(&z);
        let next = lu_inv * (target_xi - n.rows(0, du));
        let res = sys.norm.norm_u(&(&next - &xi));
        xi = next;
        if res <= fp.tol {
            return Ok(xi);
        }
        if !res.is_finite() || (k >= 2 && res > 2.0 * prev) {
            return Err(GraphError::ContractionFailed { iterations: k + 1, residual: res });
        }
        prev = res;
    }
    Err(GraphError::ContractionFailed { iterations: fp.max_iter, residual: prev })
}

/// Image of `graph` under the graph transform of `sys`.
///
/// Unstable: `θ*(ξ̂) = L_s θ(ξ) + N_s(ξ + θ(ξ))` at the preimage `ξ` of each node.
/// Stable: `σ*(η) = L_u^{-1}(σ(η̂) - N_u(σ(η) + η))` with `η̂ = L_s η + N_s(σ(η) + η)`.
pub fn graph_transform_step(
    graph: &LipschitzGraph,
    sys: &SplitSystem,
    fp: &FixedPointParams,
) -> Result<LipschitzGraph, GraphError> {
    let (du, ds) = (sys.dim_u(), sys.dim_s());
    let mut out = graph.clone();
    let codim = graph.codim;
    for i in 0..graph.grid.len() {
        let node = graph.grid.node(i);
        let v = match graph.direction {
            Direction::Unstable => {
                let xi = solve_preimage(graph, &node, sys, fp)?;
                let th = graph.eval(&xi);
                let n = sys.nonlinear(&sys.stack(&xi, &th));
                &sys.split.l_s * &th + n.rows(du, ds)
            }
            Direction::Stable => {
                let sg = graph.eval(&node);
                let n = sys.nonlinear(&sys.stack(&sg, &node));
                let eta_hat = &sys.split.l_s * &node + n.rows(du, ds);
                &sys.split.l_u_inv * (graph.eval(&eta_hat) - n.rows(0, du))
            }
        };
        out.values[i * codim..(i + 1) * codim].copy_from_slice(v.as_slice());
    }
    let (dom, cod) = graph_norms(&sys.norm, graph.direction);
    out.lip_cert = out.measure_lip(&dom, &cod);
    Ok(out)
}

/// Controls for [`compute_invariant_graph`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphParams {
    /// Half-width of the domain box.
    pub radius: f64,
    /// Nodes per axis (odd).
    pub grid_res: usize,
    /// Stop when successive sweeps differ by at most this (sup norm).
    pub tol: f64,
    pub max_sweeps: usize,
    pub fixed_point: FixedPointParams,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            radius: 1.0,
            grid_res: 201,
            tol: 1e-10,
            max_sweeps: 200,
            fixed_point: FixedPointParams::default(),
        }
    }
}

/// Contraction rate `(b+2γ)/(a-2γ)`; written so that `a = inf` gives 0.
pub fn contraction_bound(a: f64, b: f64, gamma: f64) -> f64 {
    (b + 2.0 * gamma) / a / (1.0 - 2.0 * gamma / a)
}

/// Lipschitz bound `γ/(a-b-3γ)` for the invariant graph.
pub fn lipschitz_bound(a: f64, b: f64, gamma: f64) -> f64 {
    gamma / a / (1.0 - (b + 3.0 * gamma) / a)
}

/// Checks `b + 2γ < ρ < a - 2γ`.
pub fn check_smallness(a: f64, b: f64, rho: f64, gamma: f64) -> Result<(), GraphError> {
    if !(b < rho && rho < a) {
        return Err(GraphError::NoSpectralGapAtRho { a, b, rho });
    }
    let required = ((rho - b) / 2.0).min((a - rho) / 2.0);
    if !(gamma < required) {
        return Err(GraphError::SmallnessViolated { required, actual: gamma });
    }
    Ok(())
}

/// Invariant graph of `sys` in the given direction, iterated from `θ ≡ 0`.
pub fn compute_invariant_graph(
    sys: &SplitSystem,
    direction: Direction,
    params: &GraphParams,
) -> Result<LipschitzGraph, GraphError> {
    let gamma = sys.gamma_eff();
    let (a, b, rho) = (sys.a(), sys.b(), sys.rho());
    check_smallness(a, b, rho, gamma)?;
    let (dim, codim) = match direction {
        Direction::Unstable => (sys.dim_u(), sys.dim_s()),
        Direction::Stable => (sys.dim_s(), sys.dim_u()),
    };
    let grid = Grid::new(dim, params.radius, params.grid_res)?;
    let (dom, cod) = graph_norms(&sys.norm, direction);
    let mut graph = LipschitzGraph::zero(grid, codim, direction, sys.base_point.iter().copied().collect(), rho);
    let c_bound = contraction_bound(a, b, gamma);
    let mut diag = GraphDiagnostics {
        contraction_bound: c_bound,
        lip_bound: lipschitz_bound(a, b, gamma),
        step_lip_ok: true,
        gamma,
        ..Default::default()
    };
    // Ratios below this level measure rounding in the inner solves, not the transform.
    let noise_floor = 1e4 * params.fixed_point.tol;
    let mut prev_metric = f64::NAN;
    for sweep in 1..=params.max_sweeps {
        let next = graph_transform_step(&graph, sys, &params.fixed_point)?;
        if graph.lip_cert <= 1.0 && next.lip_cert > c_bound * (1.0 + 1e-9) + 1e-12 {
            diag.step_lip_ok = false;
        }
        let sup = next.sup_distance(&graph, &cod);
        let metric = next.weighted_distance(&graph, &dom, &cod);
        if prev_metric.is_finite() && prev_metric > noise_floor {
            diag.contraction_factor = diag.contraction_factor.max(metric / prev_metric);
        }
        diag.metric_history.push(metric);
        prev_metric = metric;
        graph = next;
        diag.sweeps = sweep;
        diag.final_sup_diff = sup;
        if sup <= params.tol {
            graph.diagnostics = diag;
            return Ok(graph);
        }
    }
    Err(GraphError::NotConverged { sweeps: params.max_sweeps, last_diff: diag.final_sup_diff })
}

/// Outcome of [`verify_graph`].
#[derive(Debug, Clone, Serialize)]
pub struct GraphReport {
    /// Largest distance from `S(ξ + θ(ξ))` to the graph over the probes.
    pub invariance_residual: f64,
    /// Largest observed per-step factor along on-graph orbits (forward for
    /// stable graphs, backward for unstable ones).
    pub rate_factor: f64,
    pub rate_bound: f64,
    pub rate_check: bool,
    /// Largest ambient distance between the graph and its recomputation at `rho(1 ± 0.02)`.
    pub rho_star_diff: Option<f64>,
    pub rho_star_check: Option<bool>,
    pub probes: Vec<ProbeRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub probe_id: usize,
    pub residual: f64,
    pub rate: f64,
}

/// Controls for [`verify_graph`].
#[derive(Debug, Clone, Copy)]
pub struct VerifyParams {
    pub n_probe: usize,
    pub orbit_steps: usize,
    pub seed: u64,
    pub tol: f64,
    /// Extra slack on the per-step rate bound.
    pub rate_slack: f64,
    /// Recompute at `rho(1 ± rho_shift)`; `None` skips the check.
    pub rho_shift: Option<f64>,
    pub graph: GraphParams,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams {
            n_probe: 10,
            orbit_steps: 20,
            seed: 0,
            tol: 1e-8,
            rate_slack: 0.01,
            rho_shift: Some(0.02),
            graph: GraphParams::default(),
        }
    }
}

/// Probe points well inside the graph domain, so that images stay on the grid.
fn probe_points(graph: &LipschitzGraph, n: usize, shrink: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = graph.radius * shrink;
    (0..n)
        .map(|_| DVector::from_fn(graph.grid.dim, |_, _| rng.random_range(-r..=r)))
        .collect()
}

/// Distance from `z` to the graph measured along the codomain.
pub fn distance_to_graph(graph: &LipschitzGraph, sys: &SplitSystem, z: &DVector<f64>) -> f64 {
    let (xi, eta) = sys.unstack(z);
    match graph.direction {
        Direction::Unstable => sys.norm.norm_s(&(eta - graph.eval(&xi))),
        Direction::Stable => sys.norm.norm_u(&(xi - graph.eval(&eta))),
    }
}

fn on_graph(graph: &LipschitzGraph, sys: &SplitSystem, p: &DVector<f64>) -> DVector<f64> {
    match graph.direction {
        Direction::Unstable => sys.stack(p, &graph.eval(p)),
        Direction::Stable => sys.stack(&graph.eval(p), p),
    }
}

/// Invariance, rate and `rho` robustness checks of a converged graph.
pub fn verify_graph(
    sys: &SplitSystem,
    graph: &LipschitzGraph,
    params: &VerifyParams,
) -> Result<GraphReport, GraphError> {
    let gamma = sys.gamma_eff();
    let (a, b) = (sys.a(), sys.b());
    let fp = params.graph.fixed_point;
    // Image of a probe must stay on the grid: unstable images grow by up to a + 2γ.
    let shrink = match graph.direction {
        Direction::Unstable => 0.9 / (sys.split.min_unstable_modulus + 2.0 * gamma),
        Direction::Stable => 0.9,
    };
    let probes = probe_points(graph, params.n_probe, shrink, params.seed);
    let mut rows = Vec::with_capacity(probes.len());
    let mut max_res: f64 = 0.0;
    let mut max_rate: f64 = 0.0;
    let rate_bound = match graph.direction {
        Direction::Unstable => 1.0 / (a - 2.0 * gamma),
        Direction::Stable => b + 2.0 * gamma + params.rate_slack,
    };
    for (id, p) in probes.iter().enumerate() {
        let z = on_graph(graph, sys, p);
        let res = distance_to_graph(graph, sys, &sys.s(&z));
        max_res = max_res.max(res);
        let mut rate: f64 = 0.0;
        let mut cur = p.clone();
        let mut cur_norm = sys.norm_coords(&z);
        for _ in 0..params.orbit_steps {
            let next = match graph.direction {
                Direction::Unstable => solve_preimage(graph, &cur, sys, &fp)?,
                Direction::Stable => {
                    let img = sys.s(&on_graph(graph, sys, &cur));
                    sys.unstack(&img).1
                }
            };
            let next_norm = sys.norm_coords(&on_graph(graph, sys, &next));
            if cur_norm <= 1e-14 || next_norm <= 1e-300 {
                break;
            }
            rate = rate.max(next_norm / cur_norm);
            cur = next;
            cur_norm = next_norm;
        }
        max_rate = max_rate.max(rate);
        rows.push(ProbeRow { probe_id: id, residual: res, rate });
    }
    let (rho_star_diff, rho_star_check) = match params.rho_shift {
        Some(shift) => {
            let mut worst: f64 = 0.0;
            for s in [1.0 - shift, 1.0 + shift] {
                let other_sys = sys.resplit(sys.rho() * s)?;
                let other = compute_invariant_graph(&other_sys, graph.direction, &params.graph)?;
                worst = worst.max(ambient_graph_distance(sys, graph, &other_sys, &other));
            }
            (Some(worst), Some(worst <= params.tol))
        }
        None => (None, None),
    };
    Ok(GraphReport {
        invariance_residual: max_res,
        rate_factor: max_rate,
        rate_bound,
        rate_check: max_rate <= rate_bound * (1.0 + 1e-9),
        rho_star_diff,
        rho_star_check,
        probes: rows,
    })
}

/// Compares two graphs of the same manifold computed in possibly different
/// split bases: each node of `g1` is mapped to ambient space and re-read in
/// the coordinates of `sys2`.
pub fn ambient_graph_distance(
    sys1: &SplitSystem,
    g1: &LipschitzGraph,
    sys2: &SplitSystem,
    g2: &LipschitzGraph,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..g1.grid.len() {
        let node = g1.grid.node(i);
        let z1 = on_graph(g1, sys1, &node);
        let z2 = sys2.to_coords(&sys1.to_ambient(&z1));
        let (xi, eta) = sys2.unstack(&z2);
        let (p, q) = match g2.direction {
            Direction::Unstable => (xi, eta),
            Direction::Stable => (eta, xi),
        };
        if !g2.grid.contains(&p) {
            continue;
        }
        worst = worst.max((q - g2.eval(&p)).norm());
    }
    worst
}

/// First step at which an orbit leaves the decay envelope.
///
/// For a stable graph the orbit is iterated forward from `σ(η) + η` shifted by
/// `offset` along `X_u`; for an unstable graph it is iterated backward with
/// [`SplitSystem::invert`] from a point shifted along `X_s`. The envelope is a
/// per-step norm factor of `bound`. Returns `None` if the orbit stays inside
/// for `steps` steps.
pub fn decay_failure_step(
    sys: &SplitSystem,
    graph: &LipschitzGraph,
    p: &DVector<f64>,
    offset: &DVector<f64>,
    bound: f64,
    steps: usize,
    fp: &FixedPointParams,
) -> Result<Option<usize>, GraphError> {
    let mut z = on_graph(graph, sys, p);
    let (du, ds) = (sys.dim_u(), sys.dim_s());
    match graph.direction {
        Direction::Stable => {
            let mut rows = z.rows_mut(0, du);
            rows += offset;
        }
        Direction::Unstable => {
            let mut rows = z.rows_mut(du, ds);
            rows += offset;
        }
    }
    let mut n0 = sys.norm_coords(&z);
    for k in 1..=steps {
        let next = match graph.direction {
            Direction::Stable => sys.s(&z),
            Direction::Unstable => sys.invert(&z, fp)?,
        };
        let n1 = sys.norm_coords(&next);
        if n1 > bound * n0 {
            return Ok(Some(k));
        }
        z = next;
        n0 = n1;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn saddle(gamma: f64) -> MapModel {
        MapModel::new(
            move |v: &DVector<f64>| {
                DVector::from_vec(vec![2.0 * v[0] + gamma * v[1].sin(), 0.5 * v[1] + gamma * v[0].sin()])
            },
            DomainBox::cube(2, 4.0),
        )
        .with_lip(gamma)
    }

    fn linear_system(m: DMatrix<f64>) -> SplitSystem {
        let model = {
            let m2 = m.clone();
            MapModel::new(move |v: &DVector<f64>| &m2 * v, DomainBox::cube(m.nrows(), 4.0)).with_lip(0.0)
        };
        SplitSystem::linearize(&model, &DVector::zeros(m.nrows()), 1.0, 0.0).unwrap()
    }

    /// Saddle split with `L = diag(2, 0.5)` and `N = 0.05 (sin y, sin x)`.
    fn saddle_system(gamma: f64) -> SplitSystem {
        let split = split_spectrum(&dmatrix![2.0, 0.0; 0.0, 0.5], 1.0).unwrap();
        let norm = canonical_norm(&split).unwrap();
        SplitSystem::from_model(&saddle(gamma), &DVector::zeros(2), split, norm, gamma)
    }

    fn params(res: usize) -> GraphParams {
        GraphParams { grid_res: res, ..Default::default() }
    }

    #[test]
    fn extension_agrees_inside_and_retracts_outside() {
        let split = split_spectrum(&dmatrix![2.0, 0.0; 0.0, 0.5], 1.0).unwrap();
        let norm = canonical_norm(&split).unwrap();
        let g = 0.05;
        let n = move |z: &DVector<f64>| DVector::from_vec(vec![0.0, g * z[0].sin()]);
        let ext = extend_lipschitz(n, norm, 1.0);
        let inside = DVector::from_vec(vec![0.3, -0.2]);
        assert_eq!(ext(&inside), n(&inside));
        let out = ext(&DVector::from_vec(vec![2.0, 0.0]));
        assert!((out[1] - g * 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn extension_at_most_doubles_lipschitz_constant() {
        let split = split_spectrum(&dmatrix![2.0, 0.0; 0.0, 0.5], 1.0).unwrap();
        let norm = canonical_norm(&split).unwrap();
        let g = 0.05;
        let ext = extend_lipschitz(move |z: &DVector<f64>| DVector::from_vec(vec![0.0, g * z[0].sin()]), norm.clone(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..20_000 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
            let y = &x + DVector::from_fn(2, |_, _| rng.random_range(-1e-3..1e-3));
            let q = norm.norm_coords(&(ext(&x) - ext(&y))) / norm.norm_coords(&(&x - &y));
            worst = worst.max(q);
            assert!(norm.norm_coords(&ext(&x)) <= g * 1.0 + 1e-15);
        }
        assert!(worst <= 2.0 * g + 1e-9, "{worst}");
    }

    #[test]
    fn linear_preimage_halves_target() {
        let sys = linear_system(dmatrix![2.0, 0.0; 0.0, 0.5]);
        let g = LipschitzGraph::zero(Grid::new(1, 1.0, 11).unwrap(), 1, Direction::Unstable, vec![0.0; 2], 1.0);
        let xi = solve_preimage(&g, &DVector::from_vec(vec![1.0]), &sys, &FixedPointParams::default()).unwrap();
        assert!((xi[0].abs() - 0.5).abs() < 1e-15);
    }

    /// Bracketing oracle for the scalar preimage equation of the saddle on θ = 0:
    /// 2ξ + 0.05 sin(0) = ξ̂, so the nonlinearity vanishes; with θ = 0.1 ξ it does not.
    #[test]
    fn nonlinear_preimage_matches_bisection() {
        let sys = saddle_system(0.05);
        let sign = sys.split.basis_u[(0, 0)].signum() * sys.split.basis_s[(1, 0)].signum();
        let grid = Grid::new(1, 1.0, 201).unwrap();
        let g = LipschitzGraph::from_fn(grid, 1, Direction::Unstable, |p| DVector::from_vec(vec![0.1 * p[0]]));
        let target = 0.7;
        // In ambient terms with these bases (signs aside): 2ξ + 0.05 sin(θ) = target.
        let f = |x: f64| 2.0 * x + 0.05 * sign * (0.1 * x).sin() - target;
        let (mut lo, mut hi) = (-1.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let xi = solve_preimage(&g, &DVector::from_vec(vec![target]), &sys, &FixedPointParams::default()).unwrap();
        assert!((xi[0] - 0.5 * (lo + hi)).abs() < 1e-10);
    }

    #[test]
    fn zero_graph_is_fixed_for_linear_map() {
        let sys = linear_system(dmatrix![2.0, 0.0; 0.0, 0.5]);
        let g = LipschitzGraph::zero(Grid::new(1, 1.0, 21).unwrap(), 1, Direction::Unstable, vec![0.0; 2], 1.0);
        let next = graph_transform_step(&g, &sys, &FixedPointParams::default()).unwrap();
        assert!(next.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_step_with_linear_stable_coupling() {
        // S(x, y) = (2x, 0.5y + 0.1x): from θ = 0 the new graph is 0.1 * ξ̂/2.
        let eps = 0.1;
        let model = MapModel::new(
            move |v: &DVector<f64>| DVector::from_vec(vec![2.0 * v[0], 0.5 * v[1] + eps * v[0]]),
            DomainBox::cube(2, 4.0),
        );
        let split = split_spectrum(&dmatrix![2.0, 0.0; 0.0, 0.5], 1.0).unwrap();
        let norm = canonical_norm(&split).unwrap();
        let sign = split.basis_u[(0, 0)] * split.basis_s[(1, 0)];
        let sys = SplitSystem::from_model(&model, &DVector::zeros(2), split, norm, eps);
        let g = LipschitzGraph::zero(Grid::new(1, 1.0, 21).unwrap(), 1, Direction::Unstable, vec![0.0; 2], 1.0);
        let next = graph_transform_step(&g, &sys, &FixedPointParams::default()).unwrap();
        for i in 0..21 {
            let xi = g.grid.node(i)[0];
            assert!((next.node_value(i)[0] - sign * 0.05 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn step_contracts_weighted_metric() {
        let sys = saddle_system(0.05);
        let grid = Grid::new(1, 1.0, 101).unwrap();
        let bound = contraction_bound(sys.a(), sys.b(), 0.05);
        let (dom, cod) = graph_norms(&sys.norm, Direction::Unstable);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (c1, c2, c3) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3));
            let t = LipschitzGraph::from_fn(grid.clone(), 1, Direction::Unstable, |p| DVector::from_vec(vec![c1 * p[0] + c3 * (2.0 * p[0]).sin() / 2.0]));
            let u = LipschitzGraph::from_fn(grid.clone(), 1, Direction::Unstable, |p| DVector::from_vec(vec![c2 * p[0]]));
            let d0 = t.weighted_distance(&u, &dom, &cod);
            let fp = FixedPointParams::default();
            let d1 = graph_transform_step(&t, &sys, &fp)
                .unwrap()
                .weighted_distance(&graph_transform_step(&u, &sys, &fp).unwrap(), &dom, &cod);
            assert!(d1 <= bound * d0 * (1.0 + 1e-6), "{d1} > {bound} * {d0}");
        }
    }

    #[test]
    fn linear_map_has_flat_manifolds() {
        let sys = linear_system(dmatrix![2.0, 0.0; 0.0, 0.5]);
        for dir in [Direction::Unstable, Direction::Stable] {
            let g = compute_invariant_graph(&sys, dir, &params(41)).unwrap();
            assert!(g.values.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn linear_coupling_gives_invariant_line() {
        // θ(2x) = 0.5 θ(x) + 0.1 x  =>  θ(x) = (0.2/3) x.
        let model = MapModel::new(
            |v: &DVector<f64>| DVector::from_vec(vec![2.0 * v[0], 0.5 * v[1] + 0.1 * v[0]]),
            DomainBox::cube(2, 4.0),
        );
        let split = split_spectrum(&dmatrix![2.0, 0.0; 0.0, 0.5], 1.0).unwrap();
        let norm = canonical_norm(&split).unwrap();
        let sign = split.basis_u[(0, 0)] * split.basis_s[(1, 0)];
        let sys = SplitSystem::from_model(&model, &DVector::zeros(2), split, norm, 0.1);
        let g = compute_invariant_graph(&sys, Direction::Unstable, &params(41)).unwrap();
        for i in 0..41 {
            let xi = g.grid.node(i)[0];
            assert!((g.node_value(i)[0] - sign * 0.2 / 3.0 * xi).abs() < 1e-9);
        }
    }

    /// Backward-shooting oracle: a point on the unstable manifold is the
    /// limit of `S^n` applied to points on `X_u` pulled back `n` steps.
    #[test]
    fn saddle_graph_matches_backward_shooting() {
        let sys = saddle_system(0.05);
        let g = compute_invariant_graph(&sys, Direction::Unstable, &params(1001)).unwrap();
        // Ambient oracle: for target x-coordinate X, find x0 small such that
        // iterating S n times from (x0, 0) lands on X, then read y.
        let f = |p: (f64, f64)| (2.0 * p.0 + 0.05 * p.1.sin(), 0.5 * p.1 + 0.05 * p.0.sin());
        let shoot = |target: f64| -> f64 {
            let n = 40;
            let land = |x0: f64| {
                let mut p = (x0, 0.0);
                for _ in 0..n {
                    p = f(p);
                }
                p
            };
            let (mut lo, mut hi) = (-2.0 * target.abs() / 2f64.powi(n) - 1e-300, 2.0 * target.abs() / 2f64.powi(n) + 1e-300);
            for _ in 0..300 {
                let mid = 0.5 * (lo + hi);
                if (land(mid).0 - target) * (land(lo).0 - target) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            land(0.5 * (lo + hi)).1
        };
        let probes = [-0.9, -0.6, -0.3, -0.1, 0.0, 0.1, 0.3, 0.6, 0.9];
        for x in probes {
            let y_oracle = shoot(x);
            let amb = DVector::from_vec(vec![x, 0.0]);
            let xi = sys.to_coords(&amb).rows(0, 1).into_owned();
            let z = sys.stack(&xi, &g.eval(&xi));
            let y = sys.to_ambient(&z)[1];
            assert!((y - y_oracle).abs() < 1e-6, "x = {x}: {y} vs {y_oracle}");
        }
    }

    #[test]
    fn verify_linear_saddle_is_exact() {
        let sys = linear_system(dmatrix![2.0, 0.0; 0.0, 0.5]);
        let g = compute_invariant_graph(&sys, Direction::Stable, &params(41)).unwrap();
        let rep = verify_graph(&sys, &g, &VerifyParams { graph: params(41), ..Default::default() }).unwrap();
        assert!(rep.invariance_residual <= 1e-12);
        assert!(rep.rate_factor <= sys.b() + 1e-12);
    }

    #[test]
    fn stable_and_unstable_graphs_meet_only_at_base() {
        let sys = saddle_system(0.05);
        let gu = compute_invariant_graph(&sys, Direction::Unstable, &params(201)).unwrap();
        let gs = compute_invariant_graph(&sys, Direction::Stable, &params(201)).unwrap();
        // Fixed point of ξ ↦ σ(θ(ξ)) is the intersection.
        let mut xi = DVector::from_vec(vec![0.7]);
        for _ in 0..200 {
            xi = gs.eval(&gu.eval(&xi));
        }
        assert!(xi.norm() < 1e-10);
    }
}
