//! Hyperbolicity certificates for fixed points, straightening of the local
//! manifolds onto the coordinate subspaces, and orbit checks near the point.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_transform::{
    compute_invariant_graph, Direction, GraphError, GraphParams, LipschitzGraph, MapModel, SplitSystem, VecMap,
};
use crate::spectral_split::{canonical_norm, resolvent_bound, split_spectrum, SplitError, SplitLinearMap};

/// Inflation applied to sampled Lipschitz estimates.
pub const EMPIRICAL_INFLATION: f64 = 1.1;
/// Resolution of the straightening threshold search.
pub const GAMMA1_RESOLUTION: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypError {
    #[error("not an equilibrium: |T(x*) - x*| = {residual:e}")]
    NotAnEquilibrium { residual: f64 },
    #[error("no gap at the unit circle: a = {a}, b = {b}")]
    GapViolated { a: f64, b: f64 },
    #[error("smallness violated: {inequality} ({lhs} vs {rhs})")]
    SmallnessViolated { inequality: String, lhs: f64, rhs: f64 },
    #[error("straightening map is not bi-Lipschitz: 2f*(a-b-2γ)/(a-b-3γ) = {value} >= 1")]
    StraighteningContractionFailed { value: f64 },
    #[error("certificate is not strong (γ = {gamma} >= γ₁ = {gamma1})")]
    NotStrong { gamma: f64, gamma1: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum LipMode {
    Analytic,
    Empirical,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LipEstimate {
    pub value: f64,
    pub mode: LipMode,
}

/// Sampling region: the ball of `radius` in `norm` around the origin of `dim`-space.
pub struct SampleRegion<'a> {
    pub dim: usize,
    pub radius: f64,
    pub norm: &'a dyn Fn(&DVector<f64>) -> f64,
}

impl SampleRegion<'_> {
    fn retract(&self, x: DVector<f64>) -> DVector<f64> {
        let n = (self.norm)(&x);
        if n > self.radius {
            x * (self.radius / n)
        } else {
            x
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let r = self.radius;
        self.retract(DVector::from_fn(self.dim, |_, _| rng.random_range(-r..=r)))
    }

    /// A point and a partner at a log-uniform distance, both inside the ball.
    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
        let x = self.sample(rng);
        let dir = DVector::from_fn(self.dim, |_, _| rng.random_range(-1.0..=1.0));
        let scale = self.radius * 10f64.powf(rng.random_range(-6.0..=0.0));
        let y = self.retract(&x + dir * scale);
        (x, y)
    }
}

/// Lipschitz constant of `n_map` on `region`: the analytic value when given,
/// else the largest difference quotient over `n_pairs` sampled pairs, inflated by 10%.
pub fn estimate_lipschitz_constant(
    n_map: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    region: &SampleRegion,
    n_pairs: usize,
    seed: u64,
    analytic: Option<f64>,
) -> LipEstimate {
    if let Some(v) = analytic {
        return LipEstimate { value: v, mode: LipMode::Analytic };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..n_pairs {
        let (x, y) = region.sample_pair(&mut rng);
        let dx = (region.norm)(&(&x - &y));
        if dx <= 0.0 {
            continue;
        }
        best = best.max((region.norm)(&(n_map(&x) - n_map(&y))) / dx);
    }
    LipEstimate { value: best * EMPIRICAL_INFLATION, mode: LipMode::Empirical }
}

/// Lipschitz constant from sampled derivative bounds: `sup |DN|` over
/// `n_points` sampled points of the (convex) region, inflated by 10%.
/// Used for maps whose evaluation is too costly for pair sampling.
pub fn estimate_lipschitz_from_jacobian(
    jac_n: &dyn Fn(&DVector<f64>) -> DMatrix<f64>,
    op_norm: &dyn Fn(&DMatrix<f64>) -> f64,
    region: &SampleRegion,
    n_points: usize,
    seed: u64,
) -> LipEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = op_norm(&jac_n(&DVector::zeros(region.dim)));
    for _ in 0..n_points {
        let x = region.sample(&mut rng);
        best = best.max(op_norm(&jac_n(&x)));
    }
    LipEstimate { value: best * EMPIRICAL_INFLATION, mode: LipMode::Empirical }
}

/// How `certify_hyperbolic` obtains `γ` when the model carries no analytic value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipMethod {
    /// Difference quotients over this many pairs.
    Pairs(usize),
    /// Sampled Jacobian norms at this many points.
    Jacobian(usize),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyParams {
    pub delta: f64,
    pub eq_tol: f64,
    pub lip_method: LipMethod,
    pub seed: u64,
}

impl Default for CertifyParams {
    fn default() -> Self {
        CertifyParams {
            delta: 0.5,
            eq_tol: 1e-9,
            lip_method: LipMethod::Pairs(100_000),
            seed: 0,
        }
    }
}

/// One named inequality of a certificate, stored with both sides.
#[derive(Debug, Clone, Serialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn ineq(name: &str, lhs: f64, rhs: f64, strict: bool) -> Inequality {
    let holds = if strict { lhs < rhs } else { lhs <= rhs };
    Inequality { name: name.to_string(), lhs, rhs, holds }
}

#[derive(Debug, Clone, Serialize)]
pub struct HyperbolicCertificate {
    pub equilibrium: Vec<f64>,
    pub equilibrium_residual: f64,
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub dim_u: usize,
    pub dim_s: usize,
    pub gamma: f64,
    pub gamma_mode: LipMode,
    pub delta: f64,
    pub resolvent: f64,
    pub weak_flag: bool,
    pub strong_flag: bool,
    pub gamma1_threshold: f64,
    pub isolation_radius: f64,
    /// Margin `min(1 - (b+2γ), (a-2γ) - 1) / 2`.
    pub epsilon0: f64,
    /// Closed-form sufficient bound `(a-1)(1-b)/(a(2-b)-1)` for `γ R <= 1`.
    pub weak_sufficient_gamma: f64,
    pub inequalities: Vec<Inequality>,
    /// Set when `γ` was sampled rather than supplied.
    pub unverified_analytic: bool,
}

impl HyperbolicCertificate {
    /// Local manifold radius used downstream.
    pub fn local_radius(&self) -> f64 {
        self.isolation_radius / 2.0
    }

    /// Recomputes every stored inequality from the stored constants.
    pub fn recheck(&self) -> bool {
        let fresh = weak_inequalities(self.a, self.b, self.gamma, self.resolvent);
        let weak = fresh.iter().all(|i| i.holds);
        weak == self.weak_flag
            && (self.strong_flag == (weak && self.gamma < self.gamma1_threshold))
            && (!self.strong_flag || self.isolation_radius > 0.0)
    }
}

fn weak_inequalities(a: f64, b: f64, gamma: f64, resolvent: f64) -> Vec<Inequality> {
    vec![
        ineq("b + 2γ < 1", b + 2.0 * gamma, 1.0, true),
        ineq("1 < a - 2γ", 1.0, a - 2.0 * gamma, true),
        ineq("γ·|(I-L)^-1| <= 1", gamma * resolvent, 1.0, false),
    ]
}

/// Lipschitz bound `2aγ/(a-b-3γ)` for the nonlinearity after the first shear.
pub fn straighten_f(a: f64, b: f64, gamma: f64) -> f64 {
    2.0 * gamma / (1.0 - (b + 3.0 * gamma) / a)
}

/// `f/(a-b-3f)`: Lipschitz bound of the transformed unstable graph.
pub fn straighten_f_star(a: f64, b: f64, gamma: f64) -> f64 {
    let f = straighten_f(a, b, gamma);
    f / a / (1.0 - (b + 3.0 * f) / a)
}

/// `f(1+f*)(3+f*) + f*(b + 1/a)`: Lipschitz bound of the conjugated nonlinearity.
pub fn straighten_f1(a: f64, b: f64, gamma: f64) -> f64 {
    let f = straighten_f(a, b, gamma);
    let fs = straighten_f_star(a, b, gamma);
    f * (1.0 + fs) * (3.0 + fs) + fs * (b + 1.0 / a)
}

/// `2 f* (a-b-2γ)/(a-b-3γ)`: must stay below 1 for the change of variables to be bi-Lipschitz.
pub fn straighten_shear_factor(a: f64, b: f64, gamma: f64) -> f64 {
    2.0 * straighten_f_star(a, b, gamma) * (1.0 - (b + 2.0 * gamma) / a) / (1.0 - (b + 3.0 * gamma) / a)
}

/// All constraints defining the straightening threshold, at a given `γ`.
pub fn straightening_constraints_hold(a: f64, b: f64, gamma: f64) -> bool {
    let r = match resolvent_bound(a, b) {
        Ok(r) => r,
        Err(_) => return false,
    };
    let den_g = 1.0 - (b + 3.0 * gamma) / a;
    if !(den_g > 0.0) {
        return false;
    }
    let f = straighten_f(a, b, gamma);
    let den_f = 1.0 - (b + 3.0 * f) / a;
    if !(den_f > 0.0) {
        return false;
    }
    let fs = straighten_f_star(a, b, gamma);
    let f1 = straighten_f1(a, b, gamma);
    f * r < 1.0
        && b + 2.0 * f < 1.0
        && 1.0 < a - 2.0 * f
        && fs < 1.0
        && straighten_shear_factor(a, b, gamma) < 1.0
        && f1 * r < 1.0
        && b + 2.0 * f1 < 1.0
        && 1.0 < a - 2.0 * f1
}

/// Largest `γ` (to `GAMMA1_RESOLUTION`) for which every straightening
/// constraint holds; the constraints are monotone in `γ`.
pub fn gamma1_threshold(a: f64, b: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = if a.is_finite() { (a - b) / 3.0 } else { 1.0 };
    if straightening_constraints_hold(a, b, hi) {
        return hi;
    }
    while hi - lo > GAMMA1_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if straightening_constraints_hold(a, b, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Radius inside which the point is the only bounded full orbit:
/// `δ [(1 + f(γ₁)/(a-b-3f(γ₁))) (1 + γ₁/(a-b-3γ₁))]^{-1}`.
pub fn isolation_radius(a: f64, b: f64, gamma1: f64, delta: f64) -> f64 {
    let f = straighten_f(a, b, gamma1);
    let t1 = f / a / (1.0 - (b + 3.0 * f) / a);
    let t2 = gamma1 / a / (1.0 - (b + 3.0 * gamma1) / a);
    delta / ((1.0 + t1) * (1.0 + t2))
}

/// Certificate for `x_star` given a splitting of the linearisation.
///
/// `N(x) = S(x) - Lx` is examined on the `delta`-ball in the adapted norm.
pub fn certify_hyperbolic(
    model: &MapModel,
    x_star: &DVector<f64>,
    split: &SplitLinearMap,
    params: &CertifyParams,
) -> Result<(HyperbolicCertificate, SplitSystem), HypError> {
    let residual = (model.eval(x_star) - x_star).norm();
    if !(residual <= params.eq_tol) {
        return Err(HypError::NotAnEquilibrium { residual });
    }
    let (a, b) = (split.a, split.b);
    let resolvent = resolvent_bound(a, b).map_err(|_| HypError::GapViolated { a, b })?;
    let norm = canonical_norm(split)?;
    let probe = SplitSystem::from_model(model, x_star, split.clone(), norm.clone(), 0.0);
    let est = match (model.lip_data, params.lip_method) {
        (Some(v), _) => LipEstimate { value: v, mode: LipMode::Analytic },
        (None, LipMethod::Pairs(n)) => {
            let nrm = |z: &DVector<f64>| norm.norm_coords(z);
            let region = SampleRegion { dim: split.dim(), radius: params.delta, norm: &nrm };
            estimate_lipschitz_constant(&|z| probe.nonlinear(z), &region, n, params.seed, None)
        }
        (None, LipMethod::Jacobian(n)) => {
            let nrm = |z: &DVector<f64>| norm.norm_coords(z);
            let region = SampleRegion { dim: split.dim(), radius: params.delta, norm: &nrm };
            let (d, du, ds) = (split.dim(), split.dim_u(), split.dim_s());
            let mut v = DMatrix::zeros(d, d);
            v.columns_mut(0, du).copy_from(&split.basis_u);
            v.columns_mut(du, ds).copy_from(&split.basis_s);
            let mut w = DMatrix::zeros(d, d);
            w.rows_mut(0, du).copy_from(&split.coord_u);
            w.rows_mut(du, ds).copy_from(&split.coord_s);
            let mut lin = DMatrix::zeros(d, d);
            lin.view_mut((0, 0), (du, du)).copy_from(&split.l_u);
            lin.view_mut((du, du), (ds, ds)).copy_from(&split.l_s);
            let jac_n = |z: &DVector<f64>| &w * model.jacobian_at(&(x_star + &v * z)) * &v - &lin;
            estimate_lipschitz_from_jacobian(&jac_n, &|m| norm.operator_bound(m), &region, n, params.seed)
        }
    };
    let gamma = est.value;
    let inequalities = weak_inequalities(a, b, gamma, resolvent);
    if let Some(bad) = inequalities.iter().find(|i| !i.holds) {
        return Err(HypError::SmallnessViolated {
            inequality: bad.name.clone(),
            lhs: bad.lhs,
            rhs: bad.rhs,
        });
    }
    let gamma1 = gamma1_threshold(a, b);
    let strong = gamma < gamma1;
    let cert = HyperbolicCertificate {
        equilibrium: x_star.iter().copied().collect(),
        equilibrium_residual: residual,
        a,
        b,
        rho: split.rho,
        dim_u: split.dim_u(),
        dim_s: split.dim_s(),
        gamma,
        gamma_mode: est.mode,
        delta: params.delta,
        resolvent,
        weak_flag: true,
        strong_flag: strong,
        gamma1_threshold: gamma1,
        isolation_radius: if strong { isolation_radius(a, b, gamma1, params.delta) } else { 0.0 },
        epsilon0: ((1.0 - (b + 2.0 * gamma)).min(a - 2.0 * gamma - 1.0)) / 2.0,
        weak_sufficient_gamma: weak_sufficient_gamma(a, b),
        inequalities,
        unverified_analytic: est.mode == LipMode::Empirical,
    };
    Ok((cert, probe.with_gamma(gamma)))
}

/// Splits the Jacobian at `x_star` across the unit circle and certifies.
pub fn certify_at(
    model: &MapModel,
    x_star: &DVector<f64>,
    params: &CertifyParams,
) -> Result<(HyperbolicCertificate, SplitSystem), HypError> {
    let split = split_spectrum(&model.jacobian_at(x_star), 1.0)?;
    certify_hyperbolic(model, x_star, &split, params)
}

/// `(a-1)(1-b)/(a(2-b)-1)`: any `γ` up to this value has `γ R <= 1`.
pub fn weak_sufficient_gamma(a: f64, b: f64) -> f64 {
    (1.0 - 1.0 / a) * (1.0 - b) / ((2.0 - b) - 1.0 / a)
}

/// Change of variables that flattens both local manifolds onto the coordinate subspaces.
pub struct Straightening {
    /// `g(ξ, η) = (ξ + σ(θ̃(ξ) + η), θ̃(ξ) + η)` in split coordinates.
    pub g: VecMap,
    pub g_inv: VecMap,
    /// `S₁ = g⁻¹ ∘ S ∘ g` in split coordinates.
    pub conjugated: SplitSystem,
    pub sigma: LipschitzGraph,
    /// Unstable graph of the map after the first shear `h`.
    pub theta_tilde: LipschitzGraph,
    /// Sup norms of the recomputed graphs of `S₁`.
    pub flat_sup_u: f64,
    pub flat_sup_s: f64,
    pub flat: bool,
    /// Bound on `Lip(g⁻¹)`.
    pub g_inv_lip_bound: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StraightenParams {
    pub graph: GraphParams,
    /// Tolerance for the flatness post-check.
    pub flat_tol: f64,
}

/// Builds `h(ξ, η) = ξ + σ(η) + η`, the unstable graph `θ̃` of `h⁻¹ S h`,
/// `k(ξ, η) = (ξ, θ̃(ξ) + η)` and `g = h ∘ k`; both shears are triangular, so
/// `g⁻¹ = k⁻¹ ∘ h⁻¹` is explicit.
pub fn straighten_coordinates(
    sys: &SplitSystem,
    cert: &HyperbolicCertificate,
    stable_graph: &LipschitzGraph,
    params: &StraightenParams,
) -> Result<Straightening, HypError> {
    if !cert.strong_flag {
        return Err(HypError::NotStrong { gamma: cert.gamma, gamma1: cert.gamma1_threshold });
    }
    let (a, b, gamma) = (cert.a, cert.b, sys.gamma_eff());
    let shear = straighten_shear_factor(a, b, gamma);
    if !(shear < 1.0) {
        return Err(HypError::StraighteningContractionFailed { value: shear });
    }
    let du = sys.dim_u();
    let d = sys.dim();
    let sigma = Arc::new(stable_graph.clone());

    let h_inv = {
        let sigma = sigma.clone();
        move |z: &DVector<f64>| {
            let mut out = z.clone();
            let s = sigma.eval(&z.rows(du, d - du).into_owned());
            let mut top = out.rows_mut(0, du);
            top -= s;
            out
        }
    };
    let h = {
        let sigma = sigma.clone();
        move |z: &DVector<f64>| {
            let mut out = z.clone();
            let s = sigma.eval(&z.rows(du, d - du).into_owned());
            let mut top = out.rows_mut(0, du);
            top += s;
            out
        }
    };
    let base = Arc::new(sys.clone());
    let t_tilde: VecMap = {
        let (h, h_inv, base) = (h.clone(), h_inv.clone(), base.clone());
        Arc::new(move |z: &DVector<f64>| h_inv(&base.s(&h(z))))
    };
    let f = straighten_f(a, b, gamma);
    let tilde_sys = sys.in_coordinates(t_tilde, f);
    let theta_tilde = Arc::new(compute_invariant_graph(&tilde_sys, Direction::Unstable, &params.graph)?);

    let g: VecMap = {
        let (h, th) = (h.clone(), theta_tilde.clone());
        Arc::new(move |z: &DVector<f64>| {
            let mut k = z.clone();
            let t = th.eval(&z.rows(0, du).into_owned());
            let mut bottom = k.rows_mut(du, d - du);
            bottom += t;
            h(&k)
        })
    };
    let g_inv: VecMap = {
        let (h_inv, th) = (h_inv.clone(), theta_tilde.clone());
        Arc::new(move |z: &DVector<f64>| {
            let mut k = h_inv(z);
            let t = th.eval(&k.rows(0, du).into_owned());
            let mut bottom = k.rows_mut(du, d - du);
            bottom -= t;
            k
        })
    };
    let s1: VecMap = {
        let (g, g_inv, base) = (g.clone(), g_inv.clone(), base.clone());
        Arc::new(move |z: &DVector<f64>| g_inv(&base.s(&g(z))))
    };
    let f1 = straighten_f1(a, b, gamma);
    let conjugated = sys.in_coordinates(s1, f1);
    let gu = compute_invariant_graph(&conjugated, Direction::Unstable, &params.graph)?;
    let gs = compute_invariant_graph(&conjugated, Direction::Stable, &params.graph)?;
    let flat_sup_u = gu.sup_norm(&|v| conjugated.norm.norm_s(v));
    let flat_sup_s = gs.sup_norm(&|v| conjugated.norm.norm_u(v));
    Ok(Straightening {
        g,
        g_inv,
        conjugated,
        sigma: (*sigma).clone(),
        theta_tilde: (*theta_tilde).clone(),
        flat_sup_u,
        flat_sup_s,
        flat: flat_sup_u.max(flat_sup_s) <= params.flat_tol,
        g_inv_lip_bound: 1.0 / (1.0 - shear),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DichotomyReport {
    pub n_samples: usize,
    pub exited: usize,
    pub converged: usize,
    /// Orbits that neither left the ball nor converged, or converged non-monotonically.
    pub violations: usize,
    /// Smallest per-step growth factor observed on exiting orbits once the
    /// unstable component dominates.
    pub min_exit_expansion: f64,
    /// Largest per-step factor on converging orbits.
    pub max_converge_factor: f64,
}

/// Forward orbits from random points of the isolation ball either leave the
/// ball or converge monotonically to the point.
pub fn orbit_dichotomy_check(
    sys: &SplitSystem,
    cert: &HyperbolicCertificate,
    n_samples: usize,
    horizon: usize,
    tol: f64,
    seed: u64,
) -> DichotomyReport {
    let radius = cert.isolation_radius;
    let nrm = |z: &DVector<f64>| sys.norm.norm_coords(z);
    let region = SampleRegion { dim: sys.dim(), radius, norm: &nrm };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = DichotomyReport {
        n_samples,
        exited: 0,
        converged: 0,
        violations: 0,
        min_exit_expansion: f64::INFINITY,
        max_converge_factor: 0.0,
    };
    for _ in 0..n_samples {
        let mut z = region.sample(&mut rng);
        let mut n0 = nrm(&z);
        let mut monotone = true;
        let mut max_factor: f64 = 0.0;
        let mut outcome = None;
        for _ in 0..horizon {
            if n0 <= tol {
                outcome = Some(true);
                break;
            }
            let next = sys.s_raw(&z);
            let n1 = nrm(&next);
            if n1 > radius {
                outcome = Some(false);
                let (xi, eta) = sys.unstack(&z);
                let (xi1, _) = sys.unstack(&next);
                if sys.norm.norm_u(&xi) >= sys.norm.norm_s(&eta) && sys.norm.norm_u(&xi) > 0.0 {
                    rep.min_exit_expansion = rep.min_exit_expansion.min(sys.norm.norm_u(&xi1) / sys.norm.norm_u(&xi));
                }
                break;
            }
            if n1 > n0 {
                monotone = false;
            }
            max_factor = max_factor.max(n1 / n0);
            z = next;
            n0 = n1;
        }
        match outcome {
            Some(true) if monotone || cert.dim_u > 0 => {
                rep.converged += 1;
                rep.max_converge_factor = rep.max_converge_factor.max(max_factor);
                if !monotone {
                    rep.violations += 1;
                }
            }
            Some(false) => rep.exited += 1,
            _ => rep.violations += 1,
        }
    }
    rep
}

/// Searches for a second bounded full orbit inside a ball: random sequences
/// `x_{-M..=M}` are refined by the stable-forward / unstable-backward sweep
/// and the middle point is returned for each. Every result should collapse
/// to the origin.
pub fn isolation_probe(
    sys: &SplitSystem,
    radius: f64,
    n_sequences: usize,
    half_len: usize,
    sweeps: usize,
    seed: u64,
) -> Vec<f64> {
    let nrm = |z: &DVector<f64>| sys.norm.norm_coords(z);
    let region = SampleRegion { dim: sys.dim(), radius, norm: &nrm };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (du, ds) = (sys.dim_u(), sys.dim_s());
    let len = 2 * half_len + 1;
    let mut out = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut seq: Vec<DVector<f64>> = (0..len).map(|_| region.sample(&mut rng)).collect();
        for _ in 0..sweeps {
            for m in 0..len - 1 {
                let n = sys.nonlinear(&seq[m]);
                let s_next = &sys.split.l_s * seq[m].rows(du, ds) + n.rows(du, ds);
                seq[m + 1].rows_mut(du, ds).copy_from(&s_next);
            }
            for m in (0..len - 1).rev() {
                let n = sys.nonlinear(&seq[m]);
                let u_prev = &sys.split.l_u_inv * (seq[m + 1].rows(0, du) - n.rows(0, du));
                seq[m].rows_mut(0, du).copy_from(&u_prev);
            }
        }
        out.push(nrm(&seq[half_len]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_transform::{DomainBox, GraphParams};
    use nalgebra::dmatrix;

    fn saddle_model(gamma: f64) -> MapModel {
        MapModel::new(
            move |v: &DVector<f64>| DVector::from_vec(vec![2.0 * v[0] + gamma * v[1].sin(), 0.5 * v[1] + gamma * v[0].sin()]),
            DomainBox::cube(2, 4.0),
        )
    }

    fn diag_split() -> SplitLinearMap {
        split_spectrum(&dmatrix![2.0, 0.0; 0.0, 0.5], 1.0).unwrap()
    }

    #[test]
    fn zero_nonlinearity_is_analytic_zero() {
        let nrm = |z: &DVector<f64>| z.norm();
        let region = SampleRegion { dim: 2, radius: 1.0, norm: &nrm };
        let e = estimate_lipschitz_constant(&|z: &DVector<f64>| z * 0.0, &region, 1000, 1, Some(0.0));
        assert_eq!(e.value, 0.0);
        assert_eq!(e.mode, LipMode::Analytic);
    }

    #[test]
    fn empirical_sine_estimate_is_near_derivative_bound() {
        let nrm = |z: &DVector<f64>| z.norm();
        let region = SampleRegion { dim: 2, radius: 1.0, norm: &nrm };
        let n = |z: &DVector<f64>| DVector::from_vec(vec![0.0, 0.05 * z[0].sin()]);
        let e = estimate_lipschitz_constant(&n, &region, 100_000, 2, None);
        assert_eq!(e.mode, LipMode::Empirical);
        assert!((0.045..=0.055).contains(&e.value), "{}", e.value);
    }

    #[test]
    fn empirical_linear_estimate_within_ten_percent() {
        let nrm = |z: &DVector<f64>| z.norm();
        let region = SampleRegion { dim: 2, radius: 1.0, norm: &nrm };
        let c = dmatrix![0.012, 0.0; 0.0, 0.016];
        let n = move |z: &DVector<f64>| &c * z;
        let e = estimate_lipschitz_constant(&n, &region, 100_000, 3, None);
        assert!((e.value - 0.016).abs() <= 0.1 * 0.016 + 1e-12);
    }

    #[test]
    fn linear_saddle_certifies_strongly() {
        let m = MapModel::new(|v: &DVector<f64>| DVector::from_vec(vec![2.0 * v[0], 0.5 * v[1]]), DomainBox::cube(2, 4.0)).with_lip(0.0);
        let (c, _) = certify_hyperbolic(&m, &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap();
        assert!(c.weak_flag && c.strong_flag);
        assert!((c.resolvent - resolvent_bound(1.99, 0.505).unwrap()).abs() < 1e-12);
        assert!(c.recheck());
        // Exact splitting constants give the textbook value 4.
        assert_eq!(resolvent_bound(2.0, 0.5).unwrap(), 4.0);
    }

    #[test]
    fn small_sine_perturbation_is_weakly_hyperbolic() {
        let (c, _) = certify_hyperbolic(&saddle_model(0.01).with_lip(0.01), &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap();
        assert!(c.weak_flag);
        assert!((weak_sufficient_gamma(2.0, 0.5) - 0.25).abs() < 1e-15);
        assert!(c.gamma <= c.weak_sufficient_gamma);
    }

    #[test]
    fn large_gamma_violates_smallness() {
        let err = certify_hyperbolic(&saddle_model(0.4).with_lip(0.4), &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap_err();
        match err {
            HypError::SmallnessViolated { inequality, .. } => assert_eq!(inequality, "b + 2γ < 1"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn non_equilibrium_is_rejected() {
        let m = saddle_model(0.01).with_lip(0.01);
        let err = certify_hyperbolic(&m, &DVector::from_vec(vec![0.1, 0.0]), &diag_split(), &CertifyParams::default()).unwrap_err();
        assert!(matches!(err, HypError::NotAnEquilibrium { .. }));
    }

    #[test]
    fn gamma1_is_the_edge_of_the_constraint_set() {
        for (a, b) in [(2.0, 0.5), (1.5, 0.8), (3.0, 0.1)] {
            let g1 = gamma1_threshold(a, b);
            assert!(g1 > 0.0);
            assert!(straightening_constraints_hold(a, b, g1));
            assert!(!straightening_constraints_hold(a, b, g1 + 2.0 * GAMMA1_RESOLUTION));
        }
    }

    #[test]
    fn straightening_constants_vanish_at_zero() {
        assert_eq!(straighten_f(2.0, 0.5, 0.0), 0.0);
        assert_eq!(straighten_f1(2.0, 0.5, 0.0), 0.0);
        // Hand evaluation at γ = 0.01: f = 0.04/1.47.
        assert!((straighten_f(2.0, 0.5, 0.01) - 0.04 / 1.47).abs() < 1e-15);
    }

    #[test]
    fn isolation_radius_formula() {
        let (a, b, g1, d) = (2.0, 0.5, 0.02, 1.0);
        let f = 2.0 * a * g1 / (a - b - 3.0 * g1);
        let expect = d / ((1.0 + f / (a - b - 3.0 * f)) * (1.0 + g1 / (a - b - 3.0 * g1)));
        assert!((isolation_radius(a, b, g1, d) - expect).abs() < 1e-15);
    }

    fn gp(res: usize) -> GraphParams {
        GraphParams { radius: 1.0, grid_res: res, ..Default::default() }
    }

    #[test]
    fn straight_map_needs_no_change_of_variables() {
        let m = MapModel::new(|v: &DVector<f64>| DVector::from_vec(vec![2.0 * v[0], 0.5 * v[1]]), DomainBox::cube(2, 4.0)).with_lip(0.0);
        let (c, sys) = certify_hyperbolic(&m, &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap();
        let gs = compute_invariant_graph(&sys, Direction::Stable, &gp(21)).unwrap();
        let st = straighten_coordinates(&sys, &c, &gs, &StraightenParams { graph: gp(21), flat_tol: 1e-9 }).unwrap();
        let z = DVector::from_vec(vec![0.3, -0.4]);
        assert_eq!((st.g)(&z), z);
        assert!(st.flat);
    }

    #[test]
    fn linear_coupled_saddle_is_flattened_exactly() {
        // S(x, y) = (2x, 0.5y + 0.01x): unstable line y = (0.02/3) x, stable axis x = 0.
        let m = MapModel::new(|v: &DVector<f64>| DVector::from_vec(vec![2.0 * v[0], 0.5 * v[1] + 0.01 * v[0]]), DomainBox::cube(2, 4.0)).with_lip(0.01);
        let (c, sys) = certify_hyperbolic(&m, &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap();
        assert!(c.strong_flag, "{c:?}");
        let fine = GraphParams { tol: 1e-14, ..gp(41) };
        let gs = compute_invariant_graph(&sys, Direction::Stable, &fine).unwrap();
        let st = straighten_coordinates(&sys, &c, &gs, &StraightenParams { graph: fine, flat_tol: 1e-9 }).unwrap();
        assert!(st.flat_sup_u <= 1e-9 && st.flat_sup_s <= 1e-9);
        // Oracle: the linear similarity that maps axes to eigenvectors.
        let k = 0.02 / 3.0;
        let sign = sys.split.basis_u[(0, 0)] * sys.split.basis_s[(1, 0)];
        for x in [-0.5, 0.2, 0.7] {
            let gx = (st.g)(&DVector::from_vec(vec![x, 0.0]));
            assert!((gx[1] - sign * k * x).abs() < 1e-12, "{} {}", gx[1], sign * k * x);
        }
    }

    #[test]
    fn straightening_is_a_conjugacy() {
        let m = saddle_model(0.01).with_lip(0.01);
        let (c, sys) = certify_hyperbolic(&m, &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap();
        assert!(c.strong_flag);
        let gs = compute_invariant_graph(&sys, Direction::Stable, &gp(401)).unwrap();
        let st = straighten_coordinates(&sys, &c, &gs, &StraightenParams { graph: gp(401), flat_tol: 1e-6 }).unwrap();
        assert!(st.flat, "{} {}", st.flat_sup_u, st.flat_sup_s);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let z = DVector::from_fn(2, |_, _| rng.random_range(-0.3..0.3));
            let lhs = (st.g)(&st.conjugated.s(&z));
            let rhs = sys.s(&(st.g)(&z));
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn dichotomy_on_saddle() {
        let m = saddle_model(0.01).with_lip(0.01);
        let (c, sys) = certify_hyperbolic(&m, &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap();
        let rep = orbit_dichotomy_check(&sys, &c, 500, 200, 1e-12, 4);
        assert_eq!(rep.violations, 0);
        assert!(rep.min_exit_expansion >= c.a - c.gamma - 1e-12);
        // The fixed point itself never moves.
        assert_eq!(sys.s_raw(&DVector::zeros(2)).norm(), 0.0);
    }

    #[test]
    fn unstable_component_escapes_with_expansion() {
        let m = saddle_model(0.01).with_lip(0.01);
        let (c, sys) = certify_hyperbolic(&m, &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap();
        let mut z = DVector::from_vec(vec![1e-6, 0.0]);
        let mut steps = 0;
        while sys.norm_coords(&z) <= c.isolation_radius {
            let next = sys.s_raw(&z);
            assert!(next[0].abs() >= (c.a - c.gamma) * z[0].abs());
            z = next;
            steps += 1;
        }
        assert!(steps > 0 && steps < 40);
    }

    #[test]
    fn no_second_bounded_orbit_in_isolation_ball() {
        let m = saddle_model(0.05).with_lip(0.05);
        let (c, sys) = certify_hyperbolic(&m, &DVector::zeros(2), &diag_split(), &CertifyParams::default()).unwrap();
        let centres = isolation_probe(&sys, c.isolation_radius, 1000, 50, 50, 6);
        assert!(centres.iter().all(|v| *v < 1e-8), "{:?}", centres.iter().cloned().fold(0.0, f64::max));
    }
}
