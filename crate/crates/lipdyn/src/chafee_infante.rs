//! Sine-Galerkin model of `u_t - u_xx = λ(u - u³) + η sin(u_x)` on `(0, π)`
//! with Dirichlet conditions, its time-one map, equilibria, and the
//! superposition-operator remainder diagnostic.
//!
//! States are H¹-weighted coefficients `w_k = sqrt(π/2) k c_k` of
//! `u = Σ c_k sin(kx)`, so the Euclidean norm of `w` is `|u_x|_{L²}`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_transform::{DomainBox, MapModel};
use crate::hyperbolicity::{certify_at, CertifyParams, LipMethod};
use crate::morse_smale::{run_stability_experiment, ConnectionParams, Dg1Params, Invertibility, StabilityConfig, StabilityReport};
use crate::perturbation::{continue_with_fallback, ContinuationMethod, ContinuationParams, PerturbationFamily};
use crate::spectral_split::eigenvalue_moduli;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CiError {
    #[error("invalid model: {0}")]
    Config(String),
    #[error("λ = {0} is a resonant value k²")]
    ResonantLambda(f64),
    #[error("only {found} of {expected} equilibria found")]
    SeedExhausted { found: usize, expected: usize },
    #[error("λ = {lambda}: expected {expected} equilibria, found {found}")]
    CountMismatch { lambda: f64, expected: usize, found: usize },
    #[error("quadrature failed: {0}")]
    Quadrature(String),
    #[error("pipeline stage failed: {0}")]
    Stage(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GalerkinModel {
    pub modes: usize,
    pub lambda: f64,
    pub eta: f64,
    pub dt: f64,
    pub steps_per_unit: usize,
    pub dealias_points: usize,
    /// The reaction term is switched off smoothly between `r_cut` and `r_cut + 1` in H¹ norm.
    pub r_cut: f64,
}

/// `sqrt(λ|Ω|/2)`: the H¹ radius that bounds every point of negative
/// energy, hence the attractor at `η = 0`.
pub fn energy_radius(lambda: f64) -> f64 {
    (lambda * PI / 2.0).sqrt()
}

impl GalerkinModel {
    /// Defaults: `dt = 0.01`, `100` steps, `2m` collocation points and
    /// `r_cut` twice the energy radius.
    pub fn new(modes: usize, lambda: f64, eta: f64) -> Result<Self, CiError> {
        let m = GalerkinModel {
            modes,
            lambda,
            eta,
            dt: 0.01,
            steps_per_unit: 100,
            dealias_points: 2 * modes,
            r_cut: 2.0 * energy_radius(lambda).max(1.0),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        GalerkinModel { eta, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), CiError> {
        if self.modes == 0 {
            return Err(CiError::Config("modes must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CiError::Config("lambda must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(CiError::Config("eta must lie in [0, 1]".into()));
        }
        if self.steps_per_unit == 0 || ((self.steps_per_unit as f64) * self.dt - 1.0).abs() > 1e-12 {
            return Err(CiError::Config("steps_per_unit · dt must equal 1".into()));
        }
        if self.dealias_points < 2 * self.modes {
            return Err(CiError::Config("dealias_points must be at least 2·modes".into()));
        }
        if !(self.r_cut > 0.0) {
            return Err(CiError::Config("r_cut must be positive".into()));
        }
        Ok(())
    }
}

/// Collocation data on the interior points `x_j = jπ/(M+1)`.
#[derive(Debug, Clone)]
pub struct Collocation {
    pub xs: Vec<f64>,
    /// `sin(k x_j)`, `M × m`.
    pub sin: DMatrix<f64>,
    /// `k cos(k x_j)`, `M × m`: maps coefficients to `u_x`.
    pub dcos: DMatrix<f64>,
    /// Discrete sine transform back to coefficients, `m × M`.
    pub proj: DMatrix<f64>,
    /// Quadrature weight `π/(M+1)`.
    pub weight: f64,
    pub k: DVector<f64>,
}

impl Collocation {
    pub fn new(m: usize, points: usize) -> Self {
        let h = PI / (points + 1) as f64;
        let xs: Vec<f64> = (1..=points).map(|j| j as f64 * h).collect();
        let sin = DMatrix::from_fn(points, m, |j, k| ((k + 1) as f64 * xs[j]).sin());
        let dcos = DMatrix::from_fn(points, m, |j, k| (k + 1) as f64 * ((k + 1) as f64 * xs[j]).cos());
        let proj = sin.transpose() * (2.0 / (points + 1) as f64);
        Collocation { xs, sin, dcos, proj, weight: h, k: DVector::from_fn(m, |k, _| (k + 1) as f64) }
    }

    /// `∫₀^π f` for values at the collocation points.
    pub fn integrate(&self, values: &DVector<f64>) -> f64 {
        values.sum() * self.weight
    }
}

const SQRT_HALF_PI: f64 = 1.253_314_137_315_500_3;

fn to_coeffs(w: &DVector<f64>, k: &DVector<f64>) -> DVector<f64> {
    w.component_div(k) / SQRT_HALF_PI
}

fn to_weighted(c: &DVector<f64>, k: &DVector<f64>) -> DVector<f64> {
    c.component_mul(k) * SQRT_HALF_PI
}

/// Smooth switch: 1 up to `r`, 0 from `r + 1`, quintic in between.
pub fn cutoff(s: f64, r: f64) -> (f64, f64) {
    let t = s - r;
    if t <= 0.0 {
        (1.0, 0.0)
    } else if t >= 1.0 {
        (0.0, 0.0)
    } else {
        let g = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let dg = -30.0 * t * t * (1.0 - t) * (1.0 - t);
        (g, dg)
    }
}

/// Right-hand side pieces of the Galerkin system in coefficients.
pub struct Galerkin {
    pub model: GalerkinModel,
    pub col: Collocation,
    decay: DVector<f64>,
    phi: DVector<f64>,
}

impl Galerkin {
    pub fn new(model: &GalerkinModel) -> Result<Self, CiError> {
        model.validate()?;
        let col = Collocation::new(model.modes, model.dealias_points);
        let decay = col.k.map(|k| (-k * k * model.dt).exp());
        let phi = col.k.map(|k| (1.0 - (-k * k * model.dt).exp()) / (k * k));
        Ok(Galerkin { model: model.clone(), col, decay, phi })
    }

    pub fn h1_norm_coeffs(&self, c: &DVector<f64>) -> f64 {
        to_weighted(c, &self.col.k).norm()
    }

    /// Nonlinear part `P[λ(u - u³) g(|u|₁) + η sin(u_x)]`.
    pub fn nonlinear(&self, c: &DVector<f64>, with_cutoff: bool) -> DVector<f64> {
        let (lam, eta) = (self.model.lambda, self.model.eta);
        let u = &self.col.sin * c;
        let g = if with_cutoff { cutoff(self.h1_norm_coeffs(c), self.model.r_cut).0 } else { 1.0 };
        let mut f = u.map(|v| lam * g * (v - v * v * v));
        if eta != 0.0 {
            let ux = &self.col.dcos * c;
            f += ux.map(|v| eta * v.sin());
        }
        &self.col.proj * f
    }

    /// Derivative of [`Galerkin::nonlinear`] with respect to the coefficients.
    pub fn nonlinear_jacobian(&self, c: &DVector<f64>, with_cutoff: bool) -> DMatrix<f64> {
        let (lam, eta) = (self.model.lambda, self.model.eta);
        let u = &self.col.sin * c;
        let s = self.h1_norm_coeffs(c);
        let (g, dg) = if with_cutoff { cutoff(s, self.model.r_cut) } else { (1.0, 0.0) };
        let mut inner = self.col.sin.clone();
        for (j, mut row) in inner.row_iter_mut().enumerate() {
            row *= lam * g * (1.0 - 3.0 * u[j] * u[j]);
        }
        if eta != 0.0 {
            let ux = &self.col.dcos * c;
            let mut d = self.col.dcos.clone();
            for (j, mut row) in d.row_iter_mut().enumerate() {
                row *= eta * ux[j].cos();
            }
            inner += d;
        }
        let mut jac = &self.col.proj * inner;
        if dg != 0.0 && s > 0.0 {
            let react = &self.col.proj * u.map(|v| lam * (v - v * v * v));
            let grad = c.component_mul(&self.col.k).component_mul(&self.col.k) * (PI / 2.0 / s);
            jac += react * grad.transpose() * dg;
        }
        jac
    }

    /// Galerkin vector field `-k² c + N(c)`.
    pub fn field(&self, c: &DVector<f64>, with_cutoff: bool) -> DVector<f64> {
        -c.component_mul(&self.col.k).component_mul(&self.col.k) + self.nonlinear(c, with_cutoff)
    }

    pub fn field_jacobian(&self, c: &DVector<f64>, with_cutoff: bool) -> DMatrix<f64> {
        let mut j = self.nonlinear_jacobian(c, with_cutoff);
        for k in 0..self.model.modes {
            j[(k, k)] -= self.col.k[k] * self.col.k[k];
        }
        j
    }

    /// One exponential Euler step.
    pub fn step(&self, c: &DVector<f64>) -> DVector<f64> {
        self.decay.component_mul(c) + self.phi.component_mul(&self.nonlinear(c, true))
    }

    /// Time-one map in coefficients.
    pub fn flow(&self, c: &DVector<f64>) -> DVector<f64> {
        let mut c = c.clone();
        for _ in 0..self.model.steps_per_unit {
            c = self.step(&c);
        }
        c
    }

    /// Time-one map and its derivative, propagated alongside.
    pub fn flow_with_jacobian(&self, c: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.model.modes;
        let mut c = c.clone();
        let mut jac = DMatrix::identity(m, m);
        for _ in 0..self.model.steps_per_unit {
            let dn = self.nonlinear_jacobian(&c, true);
            let mut next = dn * &jac;
            for (k, mut row) in next.row_iter_mut().enumerate() {
                row *= self.phi[k];
            }
            for (k, mut row) in jac.row_iter_mut().enumerate() {
                row *= self.decay[k];
            }
            jac += next;
            c = self.step(&c);
        }
        (c, jac)
    }

    /// Largest `‖D⁻¹Φ DN(c)‖₂` along one time unit started at each weighted
    /// state, where a step is `c ↦ D(c + D⁻¹Φ N(c))`. A value below 1 makes
    /// every step, and so the time-one map, bi-Lipschitz near those states.
    pub fn step_perturbation_bound(&self, starts: &[DVector<f64>]) -> f64 {
        let scale = self.phi.component_div(&self.decay);
        let mut worst = 0.0f64;
        for w in starts {
            let mut c = to_coeffs(w, &self.col.k);
            for _ in 0..self.model.steps_per_unit {
                let mut k = self.nonlinear_jacobian(&c, true);
                for (i, mut row) in k.row_iter_mut().enumerate() {
                    row *= scale[i];
                }
                worst = worst.max(k.singular_values().max());
                c = self.step(&c);
            }
        }
        worst
    }

    pub fn energy(&self, c: &DVector<f64>) -> f64 {
        let u = &self.col.sin * c;
        let grad = self.h1_norm_coeffs(c).powi(2) / 2.0;
        grad - self.model.lambda * self.col.integrate(&u.map(|v| v * v / 2.0 - v * v * v * v / 4.0))
    }
}

/// Time-one map on H¹-weighted coefficients, with its exact derivative.
pub fn build_time_one_map(model: &GalerkinModel) -> Result<MapModel, CiError> {
    let gal = Arc::new(Galerkin::new(model)?);
    let m = model.modes;
    let (g1, g2) = (gal.clone(), gal.clone());
    let bound = 4.0 * model.r_cut;
    let map = MapModel::new(
        move |w: &DVector<f64>| to_weighted(&g1.flow(&to_coeffs(w, &g1.col.k)), &g1.col.k),
        DomainBox::cube(m, bound),
    )
    .with_jacobian(move |w: &DVector<f64>| {
        let k = &g2.col.k;
        let (_, j) = g2.flow_with_jacobian(&to_coeffs(w, k));
        DMatrix::from_fn(m, m, |a, b| j[(a, b)] * k[a] / k[b])
    });
    Ok(map)
}

/// Converts weighted coefficients to `u` on `n` equispaced points of `[0, π]`.
pub fn profile(w: &DVector<f64>, n: usize) -> Vec<(f64, f64)> {
    let k = DVector::from_fn(w.len(), |i, _| (i + 1) as f64);
    let c = to_coeffs(w, &k);
    (0..n)
        .map(|i| {
            let x = PI * i as f64 / (n - 1) as f64;
            let u: f64 = c.iter().enumerate().map(|(j, cj)| cj * ((j + 1) as f64 * x).sin()).sum();
            (x, u)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Equilibrium {
    /// `"0"`, `"phi1+"`, `"phi2-"`, ...
    pub label: String,
    pub state: Vec<f64>,
    pub h1_norm: f64,
    pub unstable_dim: usize,
    pub stable: bool,
    /// Interior sign changes of the profile.
    pub nodes: usize,
    pub residual: f64,
}

/// Number of `k ≥ 1` with `k² < λ`.
pub fn unstable_mode_count(lambda: f64) -> usize {
    (1..).take_while(|k| ((k * k) as f64) < lambda).count()
}

fn check_resonance(lambda: f64) -> Result<(), CiError> {
    let r = lambda.sqrt().round();
    if r >= 1.0 && (r * r - lambda).abs() < 1e-9 {
        return Err(CiError::ResonantLambda(lambda));
    }
    Ok(())
}

fn newton_field(gal: &Galerkin, mut c: DVector<f64>) -> Option<(DVector<f64>, f64)> {
    for _ in 0..100 {
        let f = gal.field(&c, false);
        let res = f.amax();
        if res < 1e-13 {
            return Some((c, res));
        }
        let dc = gal.field_jacobian(&c, false).lu().solve(&f)?;
        c -= dc;
        if !c.iter().all(|v| v.is_finite()) || c.amax() > 10.0 {
            return None;
        }
    }
    let res = gal.field(&c, false).amax();
    (res < 1e-11).then_some((c, res))
}

/// Equilibria at `η = 0` from Newton on the stationary Galerkin system,
/// seeded at multiples of `sin(kx)`; labels from the time-one derivative.
pub fn find_equilibria(model: &GalerkinModel) -> Result<Vec<Equilibrium>, CiError> {
    check_resonance(model.lambda)?;
    let base = model.with_eta(0.0);
    let gal = Galerkin::new(&base)?;
    let m = model.modes;
    let mut roots: Vec<DVector<f64>> = vec![DVector::zeros(m)];
    for k in 1..=m {
        let ratio = 1.0 - (k * k) as f64 / model.lambda;
        if ratio <= 0.0 {
            continue;
        }
        let amp = (4.0 / 3.0 * ratio).sqrt();
        for scale in [1.0, -1.0, 0.5, -0.5, 1.5, -1.5] {
            let mut seed = DVector::zeros(m);
            seed[k - 1] = scale * amp;
            if let Some((c, _)) = newton_field(&gal, seed) {
                if roots.iter().all(|r| (r - &c).amax() > 1e-8) {
                    roots.push(c);
                }
            }
        }
    }
    let map = build_time_one_map(&base)?;
    let mut out = Vec::new();
    for c in roots {
        let w = to_weighted(&c, &gal.col.k);
        let h1 = w.norm();
        let jac = map.jacobian_at(&w);
        let moduli = eigenvalue_moduli(&jac).map_err(|e| CiError::Config(e.to_string()))?;
        let unstable_dim = moduli.iter().filter(|&&v| v > 1.0).count();
        let u = &gal.col.sin * &c;
        let nodes = u.as_slice().windows(2).filter(|p| p[0] * p[1] < 0.0).count();
        let label = if h1 < 1e-12 {
            "0".to_string()
        } else {
            let sign = if u[0] > 0.0 { '+' } else { '-' };
            format!("phi{}{}", nodes + 1, sign)
        };
        let residual = (map.eval(&w) - &w).norm();
        out.push(Equilibrium { label, state: w.iter().copied().collect(), h1_norm: h1, unstable_dim, stable: unstable_dim == 0, nodes, residual });
    }
    out.sort_by(|a, b| a.h1_norm.partial_cmp(&b.h1_norm).unwrap().then(a.label.cmp(&b.label)));
    let expected = 2 * unstable_mode_count(model.lambda) + 1;
    if out.len() < expected {
        return Err(CiError::SeedExhausted { found: out.len(), expected });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CountRow {
    pub lambda: f64,
    pub modes: usize,
    pub expected: usize,
    pub found: usize,
    pub pass: bool,
}

/// Checks `2n + 1` equilibria for `n² < λ <= (n+1)²` at each `λ`.
pub fn verify_equilibrium_count(lambdas: &[f64], modes: usize) -> Result<Vec<CountRow>, CiError> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let expected = 2 * unstable_mode_count(lambda) + 1;
        let found = match find_equilibria(&GalerkinModel::new(modes, lambda, 0.0)?) {
            Ok(eqs) => eqs.len(),
            Err(CiError::SeedExhausted { found, .. }) => found,
            Err(e) => return Err(e),
        };
        if found != expected {
            return Err(CiError::CountMismatch { lambda, expected, found });
        }
        rows.push(CountRow { lambda, modes, expected, found, pass: true });
    }
    Ok(rows)
}

/// Equilibria at `model.eta`: the `η = 0` roots, continued when `η > 0`.
/// Labels and unstable dimensions are those of the `η = 0` roots.
pub fn find_equilibria_continued(model: &GalerkinModel, cert: &CertifyParams, cont: &ContinuationParams) -> Result<Vec<(Equilibrium, ContinuationMethod)>, CiError> {
    let base = find_equilibria(model)?;
    if model.eta == 0.0 {
        return Ok(base.into_iter().map(|e| (e, ContinuationMethod::Contraction)).collect());
    }
    let t0 = build_time_one_map(&model.with_eta(0.0))?;
    let t1 = build_time_one_map(model)?;
    base.into_iter()
        .map(|e| {
            let x0 = DVector::from_vec(e.state.clone());
            let (c, sys) = certify_at(&t0, &x0, cert).map_err(|err| CiError::Stage(format!("{}: {err}", e.label)))?;
            let (x, method, _) = continue_with_fallback(&sys, &c, &t1, cont).map_err(|err| CiError::Stage(format!("{}: {err}", e.label)))?;
            let residual = (t1.eval(&x) - &x).norm();
            let h1_norm = x.norm();
            Ok((Equilibrium { state: x.iter().copied().collect(), h1_norm, residual, ..e }, method))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ChafeeConfig {
    pub modes: usize,
    pub lambda: f64,
    pub etas: Vec<f64>,
    pub stability: StabilityConfig,
    pub dg1_samples: usize,
    pub dg1_half_width: f64,
    /// Random points per equilibrium, on the continuation sphere, whose
    /// trajectories feed the invertibility bound.
    pub invertibility_samples: usize,
}

impl ChafeeConfig {
    /// Isolation balls of radius 0.03 and continuation balls of radius 0.1,
    /// both with Jacobian-sampled Lipschitz constants.
    pub fn new(modes: usize, lambda: f64, etas: Vec<f64>) -> Self {
        let cert = |delta| CertifyParams { delta, lip_method: LipMethod::Jacobian(100), ..Default::default() };
        ChafeeConfig {
            modes,
            lambda,
            etas,
            stability: StabilityConfig {
                isolation: cert(0.03),
                continuation_cert: cert(0.1),
                continuation: ContinuationParams { n_pairs: 1000, ..Default::default() },
                connection: ConnectionParams { horizon: 300, ..Default::default() },
                invertibility: Invertibility::DerivativeSvd,
            },
            dg1_samples: 20,
            dg1_half_width: 0.5,
            invertibility_samples: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChafeeResult {
    pub equilibria: Vec<Equilibrium>,
    pub report: StabilityReport,
    /// Largest step perturbation bound over all `η`; below 1 certifies invertibility.
    pub step_bound: f64,
}

/// Equilibria at `η = 0`, their connection graph and its persistence along
/// `config.etas` (which must start at 0).
/// Equilibria plus `per_node` random points at distance `radius` from each.
fn invertibility_samples(nodes: &[(String, DVector<f64>)], radius: f64, per_node: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for (_, x) in nodes {
        out.push(x.clone());
        for _ in 0..per_node {
            let d = DVector::from_fn(x.len(), |_, _| rng.random_range(-1.0..1.0));
            out.push(x + d.normalize() * radius);
        }
    }
    out
}

pub fn chafee_stability(config: &ChafeeConfig) -> Result<ChafeeResult, CiError> {
    if config.etas.first() != Some(&0.0) {
        return Err(CiError::Config("etas must start at 0".into()));
    }
    let base = GalerkinModel::new(config.modes, config.lambda, 0.0)?;
    let equilibria = find_equilibria(&base)?;
    let models = config.etas.iter().map(|&e| build_time_one_map(&base.with_eta(e))).collect::<Result<Vec<_>, _>>()?;
    let family = PerturbationFamily::new(config.etas.clone(), models).map_err(|e| CiError::Stage(e.to_string()))?;
    let nodes: Vec<(String, DVector<f64>)> = equilibria.iter().map(|e| (e.label.clone(), DVector::from_vec(e.state.clone()))).collect();
    let dg1 = Dg1Params { center: vec![0.0; config.modes], half_width: config.dg1_half_width, samples: config.dg1_samples, horizon: 300, seed: 3 };
    let starts = invertibility_samples(&nodes, config.stability.continuation_cert.delta, config.invertibility_samples);
    let mut bound = 0.0f64;
    for &eta in &config.etas {
        bound = bound.max(Galerkin::new(&base.with_eta(eta))?.step_perturbation_bound(&starts));
    }
    let stability = StabilityConfig { invertibility: Invertibility::StepBound { bound }, ..config.stability };
    let report = run_stability_experiment(&family, &nodes, &stability, (config.dg1_samples > 0).then_some(&dg1)).map_err(|e| CiError::Stage(e.to_string()))?;
    Ok(ChafeeResult { equilibria, report, step_bound: bound })
}

/// Nonlinearity whose superposition operator is probed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScalarFn {
    Affine { a: f64, b: f64 },
    Sine,
}

impl ScalarFn {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            ScalarFn::Affine { a, b } => a * s + b,
            ScalarFn::Sine => s.sin(),
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match *self {
            ScalarFn::Affine { a, .. } => a,
            ScalarFn::Sine => s.cos(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RemainderReport {
    pub radii: Vec<f64>,
    pub ratios: Vec<f64>,
    pub limit: f64,
}

// Three-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// Composite Gauss-Legendre quadrature with `panels` panels.
fn quad(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let mid = a + (i as f64 + 0.5) * h;
            GL_NODES.iter().zip(GL_WEIGHTS).map(|(x, w)| w * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

/// `|f∘(u₀+u_r) - f∘u₀ - f'(u₀) u_r|_p / |u_r|_p` on `(0, π)` with
/// `u_r = s₀ χ_{B_r(π/2)}` and constant `u₀`, for each radius; the limit is
/// Aitken-extrapolated from the last three ratios.
pub fn nemytskii_remainder_diagnostic(f: ScalarFn, u0: f64, s0: f64, p: f64, radii: &[f64]) -> Result<RemainderReport, CiError> {
    if !(p >= 1.0) || s0 == 0.0 {
        return Err(CiError::Quadrature("need p >= 1 and s0 != 0".into()));
    }
    let x0 = PI / 2.0;
    let mut ratios = Vec::new();
    for &r in radii {
        if !(r > 0.0 && r <= x0) {
            return Err(CiError::Quadrature(format!("radius {r} leaves the domain")));
        }
        let ur = |x: f64| if (x - x0).abs() < r { s0 } else { 0.0 };
        let rem = |x: f64| {
            let v = ur(x);
            (f.eval(u0 + v) - f.eval(u0) - f.derivative(u0) * v).abs().powf(p)
        };
        let pieces = [(0.0, x0 - r), (x0 - r, x0 + r), (x0 + r, PI)];
        let num: f64 = pieces.iter().map(|&(a, b)| quad(&rem, a, b, 64)).sum();
        let den: f64 = pieces.iter().map(|&(a, b)| quad(&|x| ur(x).abs().powf(p), a, b, 64)).sum();
        if !(den > 0.0) || !num.is_finite() {
            return Err(CiError::Quadrature(format!("degenerate integrals at r = {r}")));
        }
        ratios.push((num / den).powf(1.0 / p));
    }
    let n = ratios.len();
    let limit = if n >= 3 {
        let (a, b, c) = (ratios[n - 3], ratios[n - 2], ratios[n - 1]);
        let den = c - 2.0 * b + a;
        if den.abs() > 1e-14 * c.abs().max(1e-300) {
            c - (c - b) * (c - b) / den
        } else {
            c
        }
    } else {
        *ratios.last().unwrap_or(&0.0)
    };
    Ok(RemainderReport { radii: radii.to_vec(), ratios, limit })
}

/// Forcing `η sin(u_x)` on the collocation grid.
pub fn forcing_values(gal: &Galerkin, w: &DVector<f64>) -> DVector<f64> {
    let c = to_coeffs(w, &gal.col.k);
    (&gal.col.dcos * c).map(|v| gal.model.eta * v.sin())
}

#[derive(Debug, Clone, Serialize)]
pub struct ForcingReport {
    pub max_lip_ratio: f64,
    pub max_sq_norm: f64,
    pub sq_norm_bound: f64,
    pub pass: bool,
}

/// Samples `|F(u) - F(v)|_{L²} <= η |u_x - v_x|_{L²}` and `|F(u)|² <= η² π`
/// with all integrals taken by the same collocation quadrature.
pub fn check_forcing_bounds(model: &GalerkinModel, n_pairs: usize, radius: f64, seed: u64) -> Result<ForcingReport, CiError> {
    let gal = Galerkin::new(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = model.modes;
    let l2 = |v: &DVector<f64>| gal.col.integrate(&v.map(|x| x * x)).sqrt();
    let (mut ratio, mut sq): (f64, f64) = (0.0, 0.0);
    for _ in 0..n_pairs {
        let u = DVector::from_fn(m, |_, _| rng.random_range(-radius..=radius));
        let v = DVector::from_fn(m, |_, _| rng.random_range(-radius..=radius));
        let (fu, fv) = (forcing_values(&gal, &u), forcing_values(&gal, &v));
        let dux = &gal.col.dcos * to_coeffs(&(&u - &v), &gal.col.k);
        let d = l2(&dux);
        if d > 0.0 && model.eta > 0.0 {
            ratio = ratio.max(l2(&(fu.clone() - fv)) / (model.eta * d));
        }
        sq = sq.max(gal.col.integrate(&fu.map(|x| x * x)));
    }
    let bound = model.eta * model.eta * PI;
    Ok(ForcingReport { max_lip_ratio: ratio, max_sq_norm: sq, sq_norm_bound: bound, pass: ratio <= 1.0 + 1e-12 && sq <= bound * (1.0 + 1e-12) })
}

/// Largest energy increase along `steps` time-one iterates from each probe.
pub fn energy_increase(model: &GalerkinModel, probes: &[DVector<f64>], steps: usize) -> Result<f64, CiError> {
    let gal = Galerkin::new(&model.with_eta(0.0))?;
    let mut worst = f64::NEG_INFINITY;
    for w in probes {
        let mut c = to_coeffs(w, &gal.col.k);
        let mut e = gal.energy(&c);
        for _ in 0..steps {
            c = gal.flow(&c);
            let e1 = gal.energy(&c);
            worst = worst.max(e1 - e);
            e = e1;
        }
    }
    Ok(worst)
}

/// Deterministic probe states: low-mode profiles of varying size and sign.
pub fn probe_states(modes: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let amp: f64 = rng.random_range(0.2..3.0);
            let w = DVector::from_fn(modes, |k, _| rng.random_range(-1.0..1.0) / (1.0 + k as f64));
            w.normalize() * amp
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrappingReport {
    pub eta: f64,
    /// Largest H¹ norm over the tail of every probe orbit.
    pub tail_radius: f64,
    pub trapped: bool,
}

/// Iterates each probe `steps` times and records the H¹ radius of the last
/// half of the orbit; trapped when it stays within `ball`.
pub fn trapping_check(model: &GalerkinModel, probes: &[DVector<f64>], steps: usize, ball: f64) -> Result<TrappingReport, CiError> {
    let map = build_time_one_map(model)?;
    let mut tail: f64 = 0.0;
    for w in probes {
        let mut x = w.clone();
        for n in 0..steps {
            x = map.eval(&x);
            if n >= steps / 2 {
                tail = tail.max(x.norm());
            }
        }
    }
    Ok(TrappingReport { eta: model.eta, tail_radius: tail, trapped: tail <= ball })
}

/// Observed order `log2(|T_dt - T_{dt/2}| / |T_{dt/2} - T_{dt/4}|)` at each probe.
pub fn time_step_orders(model: &GalerkinModel, probes: &[DVector<f64>]) -> Result<Vec<f64>, CiError> {
    let refine = |f: usize| {
        let m = GalerkinModel { dt: model.dt / f as f64, steps_per_unit: model.steps_per_unit * f, ..model.clone() };
        build_time_one_map(&m)
    };
    let (t1, t2, t4) = (refine(1)?, refine(2)?, refine(4)?);
    Ok(probes
        .iter()
        .map(|w| {
            let (a, b, c) = (t1.eval(w), t2.eval(w), t4.eval(w));
            ((&a - &b).norm() / (&b - &c).norm()).log2()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1(m: usize, amp: f64) -> DVector<f64> {
        let mut w = DVector::zeros(m);
        w[0] = amp;
        w
    }

    #[test]
    fn zero_is_fixed_for_every_eta() {
        for eta in [0.0, 0.05, 1.0] {
            let t = build_time_one_map(&GalerkinModel::new(8, 2.0, eta).unwrap()).unwrap();
            assert_eq!(t.eval(&DVector::zeros(8)).amax(), 0.0);
        }
    }

    #[test]
    fn heat_decay_of_first_mode() {
        let t = build_time_one_map(&GalerkinModel::new(8, 0.0, 0.0).unwrap()).unwrap();
        let out = t.eval(&e1(8, 1.0));
        assert!((out[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!(out.rows(1, 7).amax() < 1e-14);
    }

    #[test]
    fn linear_growth_factor_within_one_percent() {
        let t = build_time_one_map(&GalerkinModel::new(16, 2.0, 0.0).unwrap()).unwrap();
        let growth = t.eval(&e1(16, 1e-6))[0] / 1e-6;
        assert!((growth / 1f64.exp() - 1.0).abs() < 0.01, "{growth}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = GalerkinModel::new(6, 5.0, 0.3).unwrap();
        let t = build_time_one_map(&model).unwrap();
        let w = probe_states(6, 1, 3).remove(0);
        let j = t.jacobian_at(&w);
        let fd = crate::graph_transform::finite_difference_jacobian(&|x: &DVector<f64>| t.eval(x), &w, 1e-6);
        assert!((j - fd).amax() < 1e-6);
    }

    #[test]
    fn cutoff_is_smooth_switch() {
        assert_eq!(cutoff(0.5, 1.0), (1.0, 0.0));
        assert_eq!(cutoff(2.5, 1.0).0, 0.0);
        let (g, _) = cutoff(1.5, 1.0);
        assert!((g - 0.5).abs() < 1e-15);
        let h = 1e-7;
        let (_, dg) = cutoff(1.3, 1.0);
        assert!(((cutoff(1.3 + h, 1.0).0 - cutoff(1.3 - h, 1.0).0) / (2.0 * h) - dg).abs() < 1e-6);
    }

    #[test]
    fn equilibrium_counts() {
        let rows = verify_equilibrium_count(&[0.5, 2.0, 5.0, 10.0], 16).unwrap();
        assert_eq!(rows.iter().map(|r| r.found).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
    }

    #[test]
    fn truncation_too_coarse_changes_count() {
        assert!(matches!(verify_equilibrium_count(&[10.0], 2), Err(CiError::CountMismatch { .. })));
    }

    #[test]
    fn resonant_lambda_is_rejected() {
        assert_eq!(find_equilibria(&GalerkinModel::new(8, 4.0, 0.0).unwrap()).unwrap_err(), CiError::ResonantLambda(4.0));
    }

    #[test]
    fn lambda_two_structure() {
        let eqs = find_equilibria(&GalerkinModel::new(16, 2.0, 0.0).unwrap()).unwrap();
        assert_eq!(eqs.len(), 3);
        let zero = eqs.iter().find(|e| e.label == "0").unwrap();
        assert_eq!(zero.unstable_dim, 1);
        let k = DVector::from_fn(16, |i, _| (i + 1) as f64);
        for lab in ["phi1+", "phi1-"] {
            let e = eqs.iter().find(|e| e.label == lab).unwrap();
            assert!(e.stable);
            let c = to_coeffs(&DVector::from_vec(e.state.clone()), &k);
            let col = Collocation::new(16, 32);
            let u = &col.sin * c;
            assert!(u.iter().all(|&v| if lab.ends_with('+') { v > 0.0 } else { v < 0.0 }));
        }
        let small = find_equilibria(&GalerkinModel::new(16, 0.5, 0.0).unwrap()).unwrap();
        assert_eq!(small.len(), 1);
        assert!(small[0].stable);
    }

    #[test]
    fn affine_remainder_vanishes() {
        let radii: Vec<f64> = (1..=10).map(|i| 2f64.powi(-i)).collect();
        let r = nemytskii_remainder_diagnostic(ScalarFn::Affine { a: 2.0, b: 1.0 }, 0.3, 0.7, 2.0, &radii).unwrap();
        assert!(r.ratios.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn sine_remainder_limit() {
        let radii: Vec<f64> = (1..=10).map(|i| 2f64.powi(-i)).collect();
        let r = nemytskii_remainder_diagnostic(ScalarFn::Sine, 0.0, PI / 2.0, 2.0, &radii).unwrap();
        let exact = (1.0 - PI / 2.0).abs() / (PI / 2.0);
        assert!((r.limit - exact).abs() / exact < 0.02);
        assert!((r.ratios[9] - exact).abs() / exact < 0.02);
        let tiny = nemytskii_remainder_diagnostic(ScalarFn::Sine, 0.0, 1e-3, 2.0, &radii).unwrap();
        assert!((tiny.limit / (1e-6 / 6.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn forcing_bounds_hold() {
        let rep = check_forcing_bounds(&GalerkinModel::new(16, 2.0, 0.05).unwrap(), 10_000, 2.0, 7).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn energy_does_not_increase() {
        let model = GalerkinModel::new(16, 2.0, 0.0).unwrap();
        let probes: Vec<_> = probe_states(16, 10, 11).into_iter().filter(|w| w.norm() < model.r_cut).collect();
        assert!(energy_increase(&model, &probes, 10).unwrap() <= 1e-6);
    }

    #[test]
    fn orbits_are_trapped_for_small_eta() {
        let probes = probe_states(16, 10, 5);
        let mut radii = Vec::new();
        for eta in [0.0, 0.01, 0.05] {
            let rep = trapping_check(&GalerkinModel::new(16, 2.0, eta).unwrap(), &probes, 30, 2.0 * energy_radius(2.0)).unwrap();
            assert!(rep.trapped, "{rep:?}");
            radii.push(rep.tail_radius);
        }
        assert!(radii.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn exponential_euler_is_first_order() {
        let model = GalerkinModel::new(16, 2.0, 0.05).unwrap();
        let orders = time_step_orders(&model, &probe_states(16, 3, 2)).unwrap();
        assert!(orders.iter().all(|&p| p >= 0.95), "{orders:?}");
    }

    #[test]
    fn continued_equilibria_stay_fixed() {
        let model = GalerkinModel::new(16, 2.0, 0.05).unwrap();
        let cert = CertifyParams { delta: 0.1, lip_method: LipMethod::Jacobian(50), ..Default::default() };
        let eqs = find_equilibria_continued(&model, &cert, &ContinuationParams { n_pairs: 300, ..Default::default() }).unwrap();
        assert_eq!(eqs.len(), 3);
        for (e, _) in &eqs {
            assert!(e.residual < 1e-10, "{}", e.residual);
        }
        let zero = eqs.iter().find(|(e, _)| e.label == "0").unwrap();
        assert_eq!(zero.0.h1_norm, 0.0);
    }

    #[test]
    fn step_bound_at_zero_is_diagonal() {
        // DN(0) = λ I, so the bound is λ max_k (e^{k² dt} - 1)/k², reached at the top mode.
        let model = GalerkinModel::new(8, 2.0, 0.0).unwrap();
        let gal = Galerkin::new(&model).unwrap();
        let z = DVector::zeros(8);
        let dt = model.dt;
        let oracle = 2.0 * ((64.0 * dt).exp() - 1.0) / 64.0;
        let b = gal.step_perturbation_bound(std::slice::from_ref(&z));
        assert!((b - oracle).abs() < 1e-12 * oracle, "{b} {oracle}");
        assert!(b < 1.0);
    }

    #[test]
    fn profile_of_first_mode() {
        let w = e1(4, SQRT_HALF_PI);
        let pts = profile(&w, 128);
        assert_eq!(pts.len(), 128);
        assert!((pts[64].1 - pts[64].0.sin()).abs() < 1e-14);
    }
}
