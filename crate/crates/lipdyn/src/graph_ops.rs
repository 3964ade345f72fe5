//! Near-identity inversion and reparametrisation of perturbed graphs over a
//! fixed box domain.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::graph_transform::{Direction, Grid, GraphError, LipschitzGraph, VecMap};
use crate::hyperbolicity::EMPIRICAL_INFLATION;

/// Slack on the reparametrisation bounds.
pub const BOUND_SLACK: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpsError {
    #[error("map is not near the identity: Lip(g - I) = {lip} >= 1/2")]
    NotNearIdentity { lip: f64 },
    #[error("target |y| = {norm} outside guaranteed image radius {limit}")]
    TargetOutsideGuaranteedImage { norm: f64, limit: f64 },
    #[error("inversion did not converge: residual {residual:e} after {iterations} iterations")]
    InversionFailed { iterations: usize, residual: f64 },
    #[error("epsilon too large: measured {measured}, allowed {allowed}")]
    EpsilonTooLarge { measured: f64, allowed: f64 },
    #[error("bound violated: {which} ({lhs} > {rhs})")]
    BoundViolated { which: String, lhs: f64, rhs: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Norm on the ball where a near-identity map lives.
#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BallNorm {
    Euclidean,
    /// Max of absolute coordinates; balls are the boxes graphs live on.
    Max,
}

impl BallNorm {
    pub fn of(&self, v: &DVector<f64>) -> f64 {
        match self {
            BallNorm::Euclidean => v.norm(),
            BallNorm::Max => v.amax(),
        }
    }
}

/// A map `g` on the closed ball of `radius`, with bounds on `g - I`.
#[derive(Clone)]
pub struct NearIdentity {
    pub map: VecMap,
    pub dim: usize,
    pub radius: f64,
    pub norm: BallNorm,
    /// Bound on `Lip(g - I)` over the ball.
    pub lip_dev: f64,
    /// Bound `α` on `sup |g - I|` over the ball.
    pub sup_dev: f64,
}

fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64, norm: BallNorm) -> DVector<f64> {
    let x = DVector::from_fn(dim, |_, _| rng.random_range(-radius..=radius));
    let n = norm.of(&x);
    if n > radius {
        x * (radius / n)
    } else {
        x
    }
}

impl NearIdentity {
    pub fn with_bounds(map: VecMap, dim: usize, radius: f64, norm: BallNorm, lip_dev: f64, sup_dev: f64) -> Self {
        NearIdentity { map, dim, radius, norm, lip_dev, sup_dev }
    }

    /// Measures both deviations on `n_pairs` sampled pairs, inflated by 10%.
    pub fn measured(map: VecMap, dim: usize, radius: f64, norm: BallNorm, n_pairs: usize, seed: u64) -> Self {
        let (lip, sup) = measure_deviation(&*map, &|x| x.clone(), dim, radius, norm, n_pairs, seed);
        NearIdentity {
            map,
            dim,
            radius,
            norm,
            lip_dev: lip * EMPIRICAL_INFLATION,
            sup_dev: sup * EMPIRICAL_INFLATION,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.map)(x)
    }

    /// Radius of the ball guaranteed to lie in the image.
    pub fn image_radius(&self) -> f64 {
        self.radius - self.sup_dev
    }

    /// Bound `1/(1 - Lip(g - I))` on the Lipschitz constant of the inverse.
    pub fn inverse_lip_bound(&self) -> f64 {
        1.0 / (1.0 - self.lip_dev)
    }

    /// Solves `g(x) = y` by iterating `x ↦ y + x - g(x)` from `x = y`.
    pub fn invert(&self, y: &DVector<f64>, tol: f64, max_iter: usize) -> Result<DVector<f64>, OpsError> {
        if !(self.lip_dev < 0.5) {
            return Err(OpsError::NotNearIdentity { lip: self.lip_dev });
        }
        let ny = self.norm.of(y);
        let limit = self.image_radius();
        if !(ny <= limit) {
            return Err(OpsError::TargetOutsideGuaranteedImage { norm: ny, limit });
        }
        let mut x = y.clone();
        let mut res = f64::INFINITY;
        for _ in 0..max_iter {
            let gx = self.eval(&x);
            res = self.norm.of(&(&gx - y));
            if res <= tol {
                return Ok(x);
            }
            x = y + &x - gx;
        }
        Err(OpsError::InversionFailed { iterations: max_iter, residual: res })
    }
}

/// Sampled `(Lip, sup)` of `f - h` over the ball, no inflation.
pub fn measure_deviation(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    h: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    dim: usize,
    radius: f64,
    norm: BallNorm,
    n_pairs: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = |x: &DVector<f64>| f(x) - h(x);
    let (mut lip, mut sup): (f64, f64) = (0.0, 0.0);
    for _ in 0..n_pairs {
        let x = sample_ball(&mut rng, dim, radius, norm);
        let step = radius * 10f64.powf(rng.random_range(-5.0..=0.0));
        let dir = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0));
        let mut y = &x + dir * step;
        let ny = norm.of(&y);
        if ny > radius {
            y *= radius / ny;
        }
        let (dx, dy) = (dev(&x), dev(&y));
        sup = sup.max(norm.of(&dx));
        let d = norm.of(&(&x - &y));
        if d > 0.0 {
            lip = lip.max(norm.of(&(dx - dy)) / d);
        }
    }
    (lip, sup)
}

/// Reparametrisation result with the bound checks it passed.
#[derive(Debug, Clone, Serialize)]
pub struct Reparametrized {
    pub graph: LipschitzGraph,
    pub epsilon: f64,
    pub reference_lip: f64,
    pub lip: f64,
    pub lip_bound: f64,
    pub sup_deviation: f64,
    pub sup_bound: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ReparamParams {
    /// Supplied `ε`; measured (and inflated) when absent.
    pub epsilon: Option<f64>,
    pub n_pairs: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ReparamParams {
    fn default() -> Self {
        ReparamParams { epsilon: None, n_pairs: 20_000, seed: 0, tol: 1e-13, max_iter: 500 }
    }
}

/// New graph `θ̃ = ψ_s ∘ ψ_u⁻¹` over the box of radius `r - ε`, where `ψ`
/// maps the reference domain into split coordinates `(ξ, η)` and is `ε`-close
/// to `ξ ↦ ξ + θ(ξ)`. Norms are the max norm on coordinates.
pub fn reparametrize_unstable_graph(
    psi: VecMap,
    reference: &LipschitzGraph,
    params: &ReparamParams,
) -> Result<Reparametrized, OpsError> {
    reparametrize(psi, reference, Direction::Unstable, params)
}

/// Dual of [`reparametrize_unstable_graph`]: `φ` maps the stable reference
/// domain and `σ̃ = φ_u ∘ φ_s⁻¹`.
pub fn reparametrize_stable_graph(
    phi: VecMap,
    reference: &LipschitzGraph,
    params: &ReparamParams,
) -> Result<Reparametrized, OpsError> {
    reparametrize(phi, reference, Direction::Stable, params)
}

fn reparametrize(
    psi: VecMap,
    reference: &LipschitzGraph,
    direction: Direction,
    params: &ReparamParams,
) -> Result<Reparametrized, OpsError> {
    let p = reference.dim_domain();
    let q = reference.codim;
    // Offsets of the domain and value blocks inside the image vector.
    let (dom_off, val_off) = match direction {
        Direction::Unstable => (0, p),
        Direction::Stable => (q, 0),
    };
    let r = reference.radius;
    let norm = BallNorm::Max;
    let embed = {
        let reference = reference.clone();
        move |x: &DVector<f64>| {
            let mut out = DVector::zeros(p + q);
            out.rows_mut(dom_off, p).copy_from(x);
            out.rows_mut(val_off, q).copy_from(&reference.eval(x));
            out
        }
    };
    let psi_fn = {
        let psi = psi.clone();
        move |x: &DVector<f64>| psi(x)
    };
    let (m_lip, m_sup) = measure_deviation(&psi_fn, &embed, p, r, norm, params.n_pairs, params.seed);
    let measured = m_lip.max(m_sup);
    let epsilon = match params.epsilon {
        Some(e) => {
            // Round-off in `ψ - (id + θ)` is not a violation.
            if measured > e * (1.0 + 1e-9) + 1e-14 {
                return Err(OpsError::EpsilonTooLarge { measured, allowed: e });
            }
            e
        }
        None => measured * EMPIRICAL_INFLATION,
    };
    if !(epsilon < 0.5) || !(r - epsilon > 0.0) {
        return Err(OpsError::EpsilonTooLarge { measured: epsilon, allowed: 0.5_f64.min(r) });
    }

    let psi_dom: VecMap = {
        let psi = psi.clone();
        std::sync::Arc::new(move |x: &DVector<f64>| psi(x).rows(dom_off, p).into_owned())
    };
    let inner = NearIdentity::with_bounds(psi_dom, p, r, norm, epsilon, epsilon);
    let grid = Grid::new(p, r - epsilon, reference.grid.nodes_per_axis)?;
    let mut graph = LipschitzGraph::zero(grid, q, direction, reference.base_point.clone(), reference.rho);
    for i in 0..graph.grid.len() {
        let target = graph.grid.node(i);
        let x = inner.invert(&target, params.tol, params.max_iter)?;
        let v = psi(&x).rows(val_off, q).into_owned();
        graph.values[i * q..(i + 1) * q].copy_from_slice(v.as_slice());
    }
    let max = |v: &DVector<f64>| v.amax();
    let reference_lip = reference.measure_lip(&max, &max);
    let lip = graph.measure_lip(&max, &max);
    graph.lip_cert = lip;
    let lip_bound = (reference_lip + epsilon) / (1.0 - epsilon);
    let sup_deviation = (0..graph.grid.len())
        .map(|i| max(&(graph.node_value(i) - reference.eval(&graph.grid.node(i)))))
        .fold(0.0, f64::max);
    let sup_bound = (1.0 + reference_lip) * epsilon;
    if lip > lip_bound * (1.0 + BOUND_SLACK) {
        return Err(OpsError::BoundViolated { which: "Lip(new) <= (Lip(ref)+ε)/(1-ε)".into(), lhs: lip, rhs: lip_bound });
    }
    if sup_deviation > sup_bound * (1.0 + BOUND_SLACK) + params.tol {
        return Err(OpsError::BoundViolated { which: "|new - ref| <= (1+Lip(ref))ε".into(), lhs: sup_deviation, rhs: sup_bound });
    }
    Ok(Reparametrized { graph, epsilon, reference_lip, lip, lip_bound, sup_deviation, sup_bound })
}

/// Fraction of `n` random points of the guaranteed image ball that are hit:
/// for each, `invert` must converge to a point inside the domain ball.
pub fn containment_rate(g: &NearIdentity, n: usize, tol: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = g.image_radius();
    let hits = (0..n)
        .filter(|_| {
            let y = sample_ball(&mut rng, g.dim, limit, g.norm);
            matches!(g.invert(&y, tol, 1000), Ok(x) if g.norm.of(&x) < g.radius)
        })
        .count();
    hits as f64 / n as f64
}
