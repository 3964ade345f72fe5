//! Continuation of hyperbolic equilibria and their local unstable graphs
//! across Lipschitz-close families of maps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_transform::{
    compute_invariant_graph, Direction, GraphError, GraphParams, LipschitzGraph, MapModel, SplitSystem, VecMap,
};
use crate::hyperbolicity::{HypError, HyperbolicCertificate, Inequality, LipMode, SampleRegion, Straightening, EMPIRICAL_INFLATION};

/// Slack on the manifold deviation bounds.
pub const DEVIATION_SLACK: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PertError {
    #[error("precondition failed: {inequality} ({lhs} vs {rhs})")]
    PreconditionFailed { inequality: String, lhs: f64, rhs: f64 },
    #[error("continuation did not converge: residual {residual:e} after {iterations} iterations")]
    ContractionFailed { iterations: usize, residual: f64 },
    #[error("equilibrium count changed at η = {eta}: expected {expected}, found {found}")]
    CountMismatch { eta: f64, expected: usize, found: usize },
    #[error("equilibria too close: separation {separation} < {required}")]
    SeparationViolated { separation: f64, required: f64 },
    #[error("equilibrium {id} lacks a strong certificate")]
    NotStrong { id: usize },
    #[error("bound violated at η = {eta}: {which} ({lhs} > {rhs})")]
    BoundViolated { which: String, eta: f64, lhs: f64, rhs: f64 },
    #[error("invalid family: {0}")]
    BadFamily(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Hyp(#[from] HypError),
}

/// Maps `T_η` indexed by ascending `η`, starting at `η = 0`.
#[derive(Clone)]
pub struct PerturbationFamily {
    pub eta_values: Vec<f64>,
    pub models: Vec<MapModel>,
    /// Recorded `max(sup, Lip)` of `T_η - T_0` on the working box.
    pub closeness: Vec<f64>,
}

impl PerturbationFamily {
    pub fn new(eta_values: Vec<f64>, models: Vec<MapModel>) -> Result<Self, PertError> {
        if eta_values.is_empty() || eta_values.len() != models.len() {
            return Err(PertError::BadFamily("one model per η required".into()));
        }
        if eta_values[0] != 0.0 || eta_values.windows(2).any(|w| !(w[0] < w[1])) || *eta_values.last().unwrap() > 1.0 {
            return Err(PertError::BadFamily("η values must ascend from 0 within [0, 1]".into()));
        }
        let d = models[0].dim();
        if models.iter().any(|m| m.dim() != d) {
            return Err(PertError::BadFamily("state dimensions differ".into()));
        }
        let n = eta_values.len();
        Ok(PerturbationFamily { eta_values, models, closeness: vec![0.0; n] })
    }

    /// `T_η = T_0 + η P` for each `η`.
    pub fn additive(base: &MapModel, perturbation: VecMap, eta_values: Vec<f64>) -> Result<Self, PertError> {
        let models = eta_values
            .iter()
            .map(|&eta| {
                let (f, p) = (base.evaluator.clone(), perturbation.clone());
                let mut m = MapModel::new(move |x: &DVector<f64>| f(x) + p(x) * eta, base.domain_box.clone());
                if let Some(h) = &base.fixed_point_hint {
                    m = m.with_fixed_point_hint(h.clone());
                }
                m
            })
            .collect();
        PerturbationFamily::new(eta_values, models)
    }

    /// Fills `closeness` by sampling the box `center ± radius`.
    pub fn measure_closeness(&mut self, center: &DVector<f64>, radius: f64, n_pairs: usize, seed: u64) {
        for k in 0..self.models.len() {
            self.closeness[k] = if k == 0 {
                0.0
            } else {
                lipschitz_closeness(&self.models[0], &self.models[k], center, radius, n_pairs, seed)
            };
        }
    }
}

/// Sampled `max(sup |f - g|, Lip(f - g))` on the box `center ± radius`
/// (Euclidean norms), inflated by 10%.
pub fn lipschitz_closeness(f: &MapModel, g: &MapModel, center: &DVector<f64>, radius: f64, n_pairs: usize, seed: u64) -> f64 {
    let diff = |z: &DVector<f64>| {
        let x = center + z;
        f.eval(&x) - g.eval(&x)
    };
    let nrm = |v: &DVector<f64>| v.amax();
    let region = SampleRegion { dim: f.dim(), radius, norm: &nrm };
    let (sup, lip) = sampled_sup_lip(&diff, &mut |rng| region.sample_pair(rng), &|v| v.norm(), n_pairs, seed);
    sup.max(lip) * EMPIRICAL_INFLATION
}

/// Sampled `(sup |f|, Lip f)` over pairs drawn by `sample`, measured in `norm`.
pub fn sampled_sup_lip(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    sample: &mut dyn FnMut(&mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>),
    norm: &dyn Fn(&DVector<f64>) -> f64,
    n_pairs: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sup, mut lip): (f64, f64) = (0.0, 0.0);
    for _ in 0..n_pairs {
        let (x, y) = sample(&mut rng);
        let (fx, fy) = (f(&x), f(&y));
        sup = sup.max(norm(&fx));
        let d = norm(&(&x - &y));
        if d > 0.0 {
            lip = lip.max(norm(&(fx - fy)) / d);
        }
    }
    (sup, lip)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationParams {
    /// Closeness `ε` of the perturbed map on the certificate ball; sampled when absent.
    pub epsilon: Option<f64>,
    /// Containing radius; defaults to the smallest radius the continuation certifies.
    pub delta1: Option<f64>,
    pub n_pairs: usize,
    pub seed: u64,
    pub fp_tol: f64,
    pub max_iter: usize,
}

impl Default for ContinuationParams {
    fn default() -> Self {
        ContinuationParams { epsilon: None, delta1: None, n_pairs: 100_000, seed: 0, fp_tol: 1e-12, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationResult {
    pub eta: f64,
    pub x_star: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub bound_delta1: f64,
    /// Adapted-norm distance to the base equilibrium.
    pub displacement: f64,
    pub epsilon: f64,
    pub epsilon_mode: LipMode,
    /// Lipschitz constant `γ + ε` of the perturbed nonlinearity.
    pub gamma_new: f64,
    pub contraction_bound: f64,
    pub contraction_measured: f64,
    pub inequalities: Vec<Inequality>,
}

fn check(name: &str, lhs: f64, rhs: f64, strict: bool) -> Inequality {
    let holds = if strict { lhs < rhs } else { lhs <= rhs };
    Inequality { name: name.to_string(), lhs, rhs, holds }
}

/// `(I - L)^{-1}` in split coordinates.
fn resolvent_matrix(sys: &SplitSystem) -> DMatrix<f64> {
    let d = sys.dim();
    let l = DMatrix::from_fn(d, d, |i, j| {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        sys.linear(&e)[i]
    });
    (DMatrix::identity(d, d) - l).try_inverse().expect("I - L is invertible when the spectrum avoids 1")
}

/// Continues the equilibrium of `base` to `perturbed` by the contraction
/// `φ(z) = (I - L)^{-1}(S₁(z) - Lz)` started at 0, where `S₁` is the perturbed
/// map in the split coordinates of `base`.
pub fn continue_equilibrium(
    base: &SplitSystem,
    cert: &HyperbolicCertificate,
    perturbed: &MapModel,
    params: &ContinuationParams,
) -> Result<ContinuationResult, PertError> {
    let base_map = base.centered_map();
    let x0 = base.base_point.clone();
    let s1 = {
        let (b, p) = (base.clone(), perturbed.clone());
        move |z: &DVector<f64>| b.to_coords(&p.eval(&b.to_ambient(z)))
    };
    let diff = |z: &DVector<f64>| {
        let x = base.split.from_coords(z);
        base.split.to_coords(&(perturbed.eval(&(&x0 + &x)) - &x0 - base_map(&x)))
    };
    let nrm = |z: &DVector<f64>| base.norm_coords(z);
    let (epsilon, mode) = match params.epsilon {
        Some(e) => (e, LipMode::Analytic),
        None => {
            let region = SampleRegion { dim: base.dim(), radius: cert.delta, norm: &nrm };
            let (sup, lip) = sampled_sup_lip(&diff, &mut |rng| region.sample_pair(rng), &nrm, params.n_pairs, params.seed);
            (sup.max(lip) * EMPIRICAL_INFLATION, LipMode::Empirical)
        }
    };
    let (a, b, gamma, r) = (cert.a, cert.b, cert.gamma, cert.resolvent);
    let delta1 = params.delta1.unwrap_or(if gamma * r < 1.0 { epsilon * r / (1.0 - gamma * r) } else { f64::INFINITY });
    let g1 = epsilon + gamma;
    let inequalities = vec![
        check("(ε+γδ₁)R <= δ₁", (epsilon + gamma * delta1) * r, delta1 * (1.0 + 1e-12), false),
        check("(ε+γ)R < 1", g1 * r, 1.0, true),
        check("b + 2(ε+γ) < 1", b + 2.0 * g1, 1.0, true),
        check("1 < a - 2(ε+γ)", 1.0, a - 2.0 * g1, true),
        check("δ₁ <= δ", delta1, cert.delta, false),
    ];
    if let Some(bad) = inequalities.iter().find(|i| !i.holds) {
        return Err(PertError::PreconditionFailed { inequality: bad.name.clone(), lhs: bad.lhs, rhs: bad.rhs });
    }
    let res_inv = resolvent_matrix(base);
    let phi = |z: &DVector<f64>| &res_inv * (s1(z) - base.linear(z));
    let residual_at = |z: &DVector<f64>| {
        let x = base.to_ambient(z);
        (perturbed.eval(&x) - x).norm()
    };
    let mut z = DVector::zeros(base.dim());
    let mut prev_step = f64::NAN;
    let mut contraction: f64 = 0.0;
    let mut residual = f64::INFINITY;
    for k in 1..=params.max_iter {
        let next = phi(&z);
        let step = nrm(&(&next - &z));
        if prev_step > 1e-11 {
            contraction = contraction.max(step / prev_step);
        }
        prev_step = step;
        z = next;
        residual = residual_at(&z);
        if residual <= params.fp_tol {
            return Ok(ContinuationResult {
                eta: 0.0,
                x_star: base.to_ambient(&z).iter().copied().collect(),
                iterations: k,
                residual,
                bound_delta1: delta1,
                displacement: nrm(&z),
                epsilon,
                epsilon_mode: mode,
                gamma_new: g1,
                contraction_bound: g1 * r,
                contraction_measured: contraction,
                inequalities,
            });
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(PertError::ContractionFailed { iterations: params.max_iter, residual })
}

/// Newton's method on `T(x) = x` from `x0`, using the model's derivative.
/// A fallback for continuation when the contraction preconditions fail; it
/// certifies nothing about uniqueness.
pub fn newton_fixed_point(model: &MapModel, x0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<(DVector<f64>, usize, f64), PertError> {
    let d = x0.len();
    let mut x = x0.clone();
    let mut residual = f64::INFINITY;
    for k in 0..max_iter {
        let f = model.eval(&x) - &x;
        residual = f.norm();
        if residual <= tol {
            return Ok((x, k, residual));
        }
        let j = model.jacobian_at(&x) - DMatrix::identity(d, d);
        let Some(step) = j.lu().solve(&f) else { break };
        x -= step;
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    Err(PertError::ContractionFailed { iterations: max_iter, residual })
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ContinuationMethod {
    /// The certified contraction around the base equilibrium.
    Contraction,
    /// Newton from the base equilibrium, used when the contraction
    /// preconditions fail; the root is only required to stay in the δ-ball.
    Newton,
}

/// [`continue_equilibrium`], falling back to [`newton_fixed_point`] when a
/// precondition fails. Returns the point, the method and the failed
/// precondition (empty for the contraction).
pub fn continue_with_fallback(
    base: &SplitSystem,
    cert: &HyperbolicCertificate,
    perturbed: &MapModel,
    params: &ContinuationParams,
) -> Result<(DVector<f64>, ContinuationMethod, String), PertError> {
    match continue_equilibrium(base, cert, perturbed, params) {
        Ok(r) => Ok((DVector::from_vec(r.x_star), ContinuationMethod::Contraction, String::new())),
        Err(PertError::PreconditionFailed { inequality, lhs, rhs }) => {
            let (x, _, _) = newton_fixed_point(perturbed, &base.base_point, params.fp_tol, 100)?;
            let dist = base.norm_coords(&base.to_coords(&x));
            if dist > cert.delta {
                return Err(PertError::BoundViolated { which: "Newton root within δ".into(), eta: f64::NAN, lhs: dist, rhs: cert.delta });
            }
            Ok((x, ContinuationMethod::Newton, format!("{inequality}: {lhs} vs {rhs}")))
        }
        Err(e) => Err(e),
    }
}

/// One row of the family table.
#[derive(Debug, Clone, Serialize)]
pub struct FamilyRow {
    pub eta: f64,
    pub equilibrium_id: usize,
    pub x_star: Vec<f64>,
    pub displacement: f64,
    pub residual: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilyTable {
    pub rows: Vec<FamilyRow>,
    /// Largest `η` up to which every continuation precondition held.
    pub eta_certified_max: f64,
    pub counts: Vec<(f64, usize)>,
    pub max_displacement: Vec<(f64, f64)>,
    /// Displacements shrink as `η` decreases.
    pub monotone: bool,
}

/// Continues every base equilibrium along the family.
pub fn track_equilibrium_family(
    family: &PerturbationFamily,
    bases: &[(HyperbolicCertificate, SplitSystem)],
    params: &ContinuationParams,
) -> Result<FamilyTable, PertError> {
    for (id, (c, _)) in bases.iter().enumerate() {
        if !c.strong_flag {
            return Err(PertError::NotStrong { id });
        }
    }
    let n = bases.len();
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    let mut max_disp = Vec::new();
    let mut eta_cert = 0.0;
    let mut certified = true;
    let mut max_delta1: f64 = 0.0;
    for (k, (&eta, model)) in family.eta_values.iter().zip(&family.models).enumerate() {
        let mut found = 0;
        let mut worst: f64 = 0.0;
        let mut all_pre = true;
        for (id, (cert, sys)) in bases.iter().enumerate() {
            let p = ContinuationParams { seed: params.seed.wrapping_add(k as u64), ..*params };
            match continue_equilibrium(sys, cert, model, &p) {
                Ok(mut res) => {
                    res.eta = eta;
                    found += 1;
                    worst = worst.max(res.displacement);
                    max_delta1 = max_delta1.max(res.bound_delta1);
                    rows.push(FamilyRow {
                        eta,
                        equilibrium_id: id,
                        x_star: res.x_star.clone(),
                        displacement: res.displacement,
                        residual: res.residual,
                        bound: res.bound_delta1,
                        pass: res.displacement <= res.bound_delta1 && res.residual <= params.fp_tol,
                    });
                }
                Err(PertError::PreconditionFailed { .. }) => all_pre = false,
                Err(PertError::ContractionFailed { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        certified &= all_pre;
        if certified {
            eta_cert = eta;
            if found != n {
                return Err(PertError::CountMismatch { eta, expected: n, found });
            }
        }
        counts.push((eta, found));
        max_disp.push((eta, worst));
    }
    let mut separation = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            separation = separation.min((&bases[i].1.base_point - &bases[j].1.base_point).norm());
        }
    }
    // δ₁ is an adapted-norm radius; the equivalence constants convert it.
    let equiv = bases.iter().map(|(_, s)| s.norm.equiv_hi / s.norm.equiv_lo.max(1e-300)).fold(1.0, f64::max);
    if n > 1 && separation < 2.0 * max_delta1 * equiv {
        return Err(PertError::SeparationViolated { separation, required: 2.0 * max_delta1 * equiv });
    }
    let monotone = max_disp
        .iter()
        .filter(|(eta, _)| *eta <= eta_cert)
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[0].1 <= w[1].1 * (1.0 + 1e-6) + 1e-12);
    Ok(FamilyTable { rows, eta_certified_max: eta_cert, counts, max_displacement: max_disp, monotone })
}

#[derive(Debug, Clone, Copy)]
pub struct DeviationParams {
    pub graph: GraphParams,
    pub n_pairs: usize,
    pub seed: u64,
    /// Recentre each `T_η` at its continued equilibrium.
    pub recenter: bool,
}

impl Default for DeviationParams {
    fn default() -> Self {
        DeviationParams { graph: GraphParams::default(), n_pairs: 50_000, seed: 0, recenter: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationRow {
    pub eta: f64,
    pub sup_deviation: f64,
    pub sup_bound: f64,
    pub lip_deviation: f64,
    pub lip_bound: f64,
    /// `‖N_η - N_0‖_∞` on the working ball.
    pub n_sup_diff: f64,
    pub k_eta: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationReport {
    pub rows: Vec<DeviationRow>,
    /// Uniform Lipschitz constant of `N_η` realised over the family.
    pub gamma_uniform: f64,
    pub monotone: bool,
    #[serde(skip)]
    pub graphs: Vec<LipschitzGraph>,
}

/// Lipschitz constant of the stable part of `n` sampled on the tube
/// `{|ξ| <= ru} × {|η| <= r}` (adapted norms).
pub fn tube_lipschitz(
    sys: &SplitSystem,
    n: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    ru: f64,
    r: f64,
    n_pairs: usize,
    seed: u64,
) -> f64 {
    let (du, ds) = (sys.dim_u(), sys.dim_s());
    let clip = |v: DVector<f64>, rad: f64, nm: &dyn Fn(&DVector<f64>) -> f64| {
        let x = nm(&v);
        if x > rad {
            v * (rad / x)
        } else {
            v
        }
    };
    let nu = |v: &DVector<f64>| sys.norm.norm_u(v);
    let ns = |v: &DVector<f64>| sys.norm.norm_s(v);
    let mut sample = |rng: &mut ChaCha8Rng| {
        let xi = clip(DVector::from_fn(du, |_, _| rng.random_range(-ru..=ru)), ru, &nu);
        let eta = clip(DVector::from_fn(ds, |_, _| rng.random_range(-r..=r)), r, &ns);
        let scale = 10f64.powf(rng.random_range(-6.0..=0.0));
        let xi2 = clip(&xi + DVector::from_fn(du, |_, _| rng.random_range(-ru..=ru)) * scale, ru, &nu);
        let eta2 = clip(&eta + DVector::from_fn(ds, |_, _| rng.random_range(-r..=r)) * scale, r, &ns);
        (sys.stack(&xi, &eta), sys.stack(&xi2, &eta2))
    };
    let stable = |z: &DVector<f64>| n(z).rows(du, ds).into_owned();
    let nrm = |v: &DVector<f64>| if v.len() == ds { ns(v) } else { sys.norm_coords(v) };
    sampled_sup_lip(&stable, &mut sample, &nrm, n_pairs, seed).1
}

/// Unstable graphs of each `T_η` in the straightened coordinates of the base
/// equilibrium, compared with the bounds
/// `|θ_η| <= |N_η - N_0|_∞ / (1 - b - γ)` and `Lip θ_η <= K_η / (a - b - 2γ - K_η)`.
///
/// `continued[k]` is the ambient equilibrium of `family.models[k]`.
pub fn manifold_deviation(
    base: &SplitSystem,
    straight: &Straightening,
    family: &PerturbationFamily,
    continued: &[Vec<f64>],
    params: &DeviationParams,
) -> Result<DeviationReport, PertError> {
    if continued.len() != family.models.len() {
        return Err(PertError::BadFamily("one continued equilibrium per η required".into()));
    }
    let (a, b) = (base.a(), base.b());
    let r = params.graph.radius;
    let nrm = |z: &DVector<f64>| base.norm_coords(z);
    let region = SampleRegion { dim: base.dim(), radius: r, norm: &nrm };

    // Straightened, recentred maps Q_η and their nonlinearities N_η = Q_η - L.
    let mut q_maps: Vec<VecMap> = Vec::new();
    for (model, xs) in family.models.iter().zip(continued) {
        let (g, g_inv, sys, m) = (straight.g.clone(), straight.g_inv.clone(), base.clone(), model.clone());
        let shift = if params.recenter {
            g_inv(&base.to_coords(&DVector::from_column_slice(xs)))
        } else {
            DVector::zeros(base.dim())
        };
        q_maps.push(Arc::new(move |w: &DVector<f64>| {
            let z = g(&(w + &shift));
            g_inv(&sys.to_coords(&m.eval(&sys.to_ambient(&z)))) - &shift
        }));
    }
    let n_of = |k: usize| {
        let q = q_maps[k].clone();
        let b = base.clone();
        move |w: &DVector<f64>| q(w) - b.linear(w)
    };
    let mut gammas = Vec::new();
    for k in 0..q_maps.len() {
        let nk = n_of(k);
        let (_, lip) = sampled_sup_lip(&nk, &mut |rng| region.sample_pair(rng), &nrm, params.n_pairs, params.seed);
        gammas.push(lip * EMPIRICAL_INFLATION);
    }
    let gamma = gammas.iter().cloned().fold(0.0, f64::max);

    let mut graphs = Vec::new();
    for (k, q) in q_maps.iter().enumerate() {
        let sys = base.in_coordinates(q.clone(), gammas[k]);
        graphs.push(compute_invariant_graph(&sys, Direction::Unstable, &params.graph)?);
    }
    let theta0 = graphs[0].clone();
    let n0 = n_of(0);
    let ns = |v: &DVector<f64>| base.norm.norm_s(v);
    let nu = |v: &DVector<f64>| base.norm.norm_u(v);
    let mut rows = Vec::new();
    for (k, &eta) in family.eta_values.iter().enumerate() {
        let mut diff = graphs[k].clone();
        for (v, v0) in diff.values.iter_mut().zip(&theta0.values) {
            *v -= v0;
        }
        let sup_dev = diff.sup_norm(&ns);
        let lip_dev = diff.measure_lip(&nu, &ns);
        let nk = n_of(k);
        let dn = |w: &DVector<f64>| nk(w) - n0(w);
        let (sup_dn, _) = sampled_sup_lip(&dn, &mut |rng| region.sample_pair(rng), &nrm, params.n_pairs, params.seed);
        let dn_s = |w: &DVector<f64>| {
            let mut v = dn(w);
            v.rows_mut(0, base.dim_u()).fill(0.0);
            v
        };
        let (_, lip_dn_s) = sampled_sup_lip(&dn_s, &mut |rng| region.sample_pair(rng), &nrm, params.n_pairs, params.seed);
        let n_sup_diff = sup_dn * EMPIRICAL_INFLATION;
        let r_eta = graphs[k].sup_norm(&ns);
        let tube = tube_lipschitz(base, &n0, r, r_eta, params.n_pairs, params.seed) * EMPIRICAL_INFLATION;
        let k_eta = tube + lip_dn_s * EMPIRICAL_INFLATION;
        let sup_bound = n_sup_diff / (1.0 - b - gamma);
        let den = a - b - 2.0 * gamma - k_eta;
        let lip_bound = if den > 0.0 { k_eta / den } else { f64::INFINITY };
        let sup_ok = sup_dev <= sup_bound * (1.0 + DEVIATION_SLACK) + 1e-12;
        let lip_ok = lip_dev <= lip_bound * (1.0 + DEVIATION_SLACK) + 1e-12;
        rows.push(DeviationRow { eta, sup_deviation: sup_dev, sup_bound, lip_deviation: lip_dev, lip_bound, n_sup_diff, k_eta, pass: sup_ok && lip_ok });
        if !sup_ok {
            return Err(PertError::BoundViolated { which: "sup |θ_η| <= |N_η - N_0|/(1-b-γ)".into(), eta, lhs: sup_dev, rhs: sup_bound });
        }
        if !lip_ok {
            return Err(PertError::BoundViolated { which: "Lip θ_η <= K_η/(a-b-2γ-K_η)".into(), eta, lhs: lip_dev, rhs: lip_bound });
        }
    }
    let monotone = rows.windows(2).all(|w| w[0].sup_deviation <= w[1].sup_deviation + 1e-12 && w[0].lip_deviation <= w[1].lip_deviation + 1e-12);
    Ok(DeviationReport { rows, gamma_uniform: gamma, monotone, graphs })
}
