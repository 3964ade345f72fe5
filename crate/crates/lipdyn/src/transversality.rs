//! Intersections of Lipschitz graphs over complementary subspaces and the
//! Lipschitz transversality predicate.
//!
//! Points are written in block coordinates `(y, x)` with `y ∈ X₁`, `x ∈ X₂`;
//! graph `θ` lives over `X₁` with values in `X₂`, graph `σ` the other way round.
//! Block norms are Euclidean.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::graph_transform::{Grid, GraphError, LipschitzGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransError {
    #[error("closeness hypothesis failed: {which} ({lhs} > {rhs})")]
    HypothesisFailed { which: String, lhs: f64, rhs: f64 },
    #[error("no fixed point in ball: min residual {residual:e} exceeds grid bound {bound:e}")]
    NoFixedPointInBall { residual: f64, bound: f64 },
    #[error("point is not on both graphs: gaps {gap_theta:e}, {gap_sigma:e}")]
    NotOnBothGraphs { gap_theta: f64, gap_sigma: f64 },
    #[error("no room to recentre: r0 = {r0}")]
    NoRoomToRecenter { r0: f64 },
    #[error("charts are not over complementary subspaces: {0}")]
    DecompositionMismatch(String),
    #[error("Picard iteration did not converge: residual {residual:e}")]
    NotConverged { residual: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn euclid(v: &DVector<f64>) -> f64 {
    v.norm()
}

/// Euclidean Lipschitz constant of a gridded graph over neighbouring nodes.
pub fn graph_lip(g: &LipschitzGraph) -> f64 {
    g.measure_lip(&euclid, &euclid)
}

/// Reference graphs for the closeness hypothesis `|θ - θ̃| <= (1-c) r/2`.
pub struct Reference<'a> {
    pub theta: &'a LipschitzGraph,
    pub sigma: &'a LipschitzGraph,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum IntersectPath {
    Contraction,
    Grid,
}

#[derive(Debug, Clone, Copy)]
pub struct IntersectParams {
    pub fp_tol: f64,
    pub max_iter: usize,
    /// Nodes per axis for the grid path.
    pub grid_nodes: usize,
}

impl Default for IntersectParams {
    fn default() -> Self {
        IntersectParams { fp_tol: 1e-12, max_iter: 10_000, grid_nodes: 2001 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Intersection {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    /// `(y₁, θ̃(y₁)) + z`.
    pub point: Vec<f64>,
    pub residual: f64,
    pub path: IntersectPath,
    pub iterations: usize,
    pub lip_theta: f64,
    pub lip_sigma: f64,
    /// Radius `r` shared by the two graph domains.
    pub radius: f64,
}

fn check_shapes(theta: &LipschitzGraph, sigma: &LipschitzGraph) -> Result<(), TransError> {
    if theta.dim_domain() != sigma.codim || theta.codim != sigma.dim_domain() {
        return Err(TransError::DecompositionMismatch(format!(
            "θ: {} -> {}, σ: {} -> {}",
            theta.dim_domain(),
            theta.codim,
            sigma.dim_domain(),
            sigma.codim
        )));
    }
    Ok(())
}

/// Largest nodal distance between a graph and a reference evaluated at the same points.
fn sup_gap(g: &LipschitzGraph, reference: &LipschitzGraph) -> f64 {
    (0..g.grid.len())
        .map(|i| (g.node_value(i) - reference.eval(&g.grid.node(i))).norm())
        .fold(0.0, f64::max)
}

/// Checks the closeness hypothesis against `reference`, or against the zero
/// graphs with `c = 0` when none is given.
pub fn check_hypothesis(
    theta_t: &LipschitzGraph,
    sigma_t: &LipschitzGraph,
    reference: Option<&Reference>,
) -> Result<f64, TransError> {
    let r = theta_t.radius.min(sigma_t.radius);
    let (gap_t, gap_s, c) = match reference {
        Some(rf) => {
            let (lt, ls) = (graph_lip(rf.theta), graph_lip(rf.sigma));
            // Nodal quotients of an exactly c-Lipschitz graph carry round-off.
            let cap = rf.c * (1.0 + 1e-9);
            if !(rf.c < 1.0) || lt > cap || ls > cap {
                return Err(TransError::HypothesisFailed { which: "Lip(reference) <= c < 1".into(), lhs: lt.max(ls), rhs: rf.c.min(1.0) });
            }
            (sup_gap(theta_t, rf.theta), sup_gap(sigma_t, rf.sigma), rf.c)
        }
        None => (theta_t.sup_norm(&euclid), sigma_t.sup_norm(&euclid), 0.0),
    };
    let limit = (1.0 - c) * r / 2.0;
    if gap_t > limit {
        return Err(TransError::HypothesisFailed { which: "|θ - θ̃| <= (1-c)r/2".into(), lhs: gap_t, rhs: limit });
    }
    if gap_s > limit {
        return Err(TransError::HypothesisFailed { which: "|σ - σ̃| <= (1-c)r/2".into(), lhs: gap_s, rhs: limit });
    }
    Ok(r)
}

fn compose(theta: &LipschitzGraph, sigma: &LipschitzGraph, y: &DVector<f64>) -> DVector<f64> {
    sigma.eval(&theta.eval(y))
}

/// Picard iteration of `g = σ̃ ∘ θ̃` from `y`.
fn picard(theta: &LipschitzGraph, sigma: &LipschitzGraph, mut y: DVector<f64>, params: &IntersectParams) -> Result<(DVector<f64>, usize, f64), TransError> {
    let mut res = f64::INFINITY;
    for k in 0..params.max_iter {
        let gy = compose(theta, sigma, &y);
        res = (&gy - &y).norm();
        if res <= params.fp_tol {
            return Ok((y, k, res));
        }
        y = gy;
    }
    Err(TransError::NotConverged { residual: res })
}

/// Finds `y₁ = σ̃(θ̃(y₁))` in the half ball and returns the intersection point
/// `(y₁, θ̃(y₁)) + z` of the two translated graphs.
pub fn intersect_graphs(
    theta_t: &LipschitzGraph,
    sigma_t: &LipschitzGraph,
    offset: &DVector<f64>,
    reference: Option<&Reference>,
    params: &IntersectParams,
) -> Result<Intersection, TransError> {
    check_shapes(theta_t, sigma_t)?;
    let r = check_hypothesis(theta_t, sigma_t, reference)?;
    let (lt, ls) = (graph_lip(theta_t), graph_lip(sigma_t));
    let p = theta_t.dim_domain();
    let (y1, iterations, residual, path) = if lt * ls < 1.0 {
        let (y, k, res) = picard(theta_t, sigma_t, DVector::zeros(p), params)?;
        (y, k, res, IntersectPath::Contraction)
    } else {
        let (y, res) = grid_fixed_point(theta_t, sigma_t, r / 2.0, lt * ls, params)?;
        (y, 0, res, IntersectPath::Grid)
    };
    let y2 = theta_t.eval(&y1);
    let mut point = DVector::zeros(p + theta_t.codim);
    point.rows_mut(0, p).copy_from(&y1);
    point.rows_mut(p, theta_t.codim).copy_from(&y2);
    point += offset;
    Ok(Intersection {
        y1: y1.iter().copied().collect(),
        y2: y2.iter().copied().collect(),
        point: point.iter().copied().collect(),
        residual,
        path,
        iterations,
        lip_theta: lt,
        lip_sigma: ls,
        radius: r,
    })
}

/// Exhaustive search of `|g(y) - y|` over the box of `half` radius, then a
/// Newton polish confined to the best cell.
fn grid_fixed_point(
    theta: &LipschitzGraph,
    sigma: &LipschitzGraph,
    half: f64,
    lip_g: f64,
    params: &IntersectParams,
) -> Result<(DVector<f64>, f64), TransError> {
    let p = theta.dim_domain();
    // Keep the exhaustive search near a million nodes in higher dimensions.
    let cap = [usize::MAX, usize::MAX, 1001, 101][p.min(3)];
    let grid = Grid::new(p, half, params.grid_nodes.min(cap))?;
    let f = |y: &DVector<f64>| compose(theta, sigma, y) - y;
    let (mut best, mut best_res) = (DVector::zeros(p), f64::INFINITY);
    for i in 0..grid.len() {
        let y = grid.node(i);
        let res = f(&y).norm();
        if res < best_res {
            best_res = res;
            best = y;
        }
    }
    let h = grid.spacing();
    // A fixed point lies within half a cell diagonal of some node.
    let bound = (lip_g + 1.0) * h * (p as f64).sqrt() / 2.0;
    if best_res > bound {
        return Err(TransError::NoFixedPointInBall { residual: best_res, bound });
    }
    let node = best.clone();
    let mut y = best;
    let mut res = best_res;
    for _ in 0..50 {
        if res <= params.fp_tol {
            break;
        }
        let fy = f(&y);
        let step = (h * 1e-3).max(1e-9);
        let jac = DMatrix::from_fn(p, p, |i, j| {
            let mut yp = y.clone();
            yp[j] += step;
            (f(&yp)[i] - fy[i]) / step
        });
        let Some(dy) = jac.lu().solve(&fy) else { break };
        let cand = &y - dy;
        let cres = f(&cand).norm();
        if cres >= res || (&cand - &node).amax() > h {
            break;
        }
        y = cand;
        res = cres;
    }
    Ok((y, res))
}

/// Largest distance between Picard limits started from `n_seeds` random
/// points of the half ball and `y1`.
pub fn uniqueness_spread(
    theta_t: &LipschitzGraph,
    sigma_t: &LipschitzGraph,
    y1: &[f64],
    n_seeds: usize,
    seed: u64,
    params: &IntersectParams,
) -> Result<f64, TransError> {
    let p = theta_t.dim_domain();
    let half = theta_t.radius.min(sigma_t.radius) / 2.0;
    let target = DVector::from_column_slice(y1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spread: f64 = 0.0;
    for _ in 0..n_seeds {
        let mut y0 = DVector::from_fn(p, |_, _| rng.random_range(-half..=half));
        let n = y0.norm();
        if n > half {
            y0 *= half / n;
        }
        let (y, _, _) = picard(theta_t, sigma_t, y0, params)?;
        spread = spread.max((y - &target).norm());
    }
    Ok(spread)
}

/// Local charts at an intersection point, vanishing at the origin.
#[derive(Debug, Clone, Serialize)]
pub struct TransversalWitness {
    pub point: Vec<f64>,
    pub dims: (usize, usize),
    pub radius0: f64,
    pub chart_theta: LipschitzGraph,
    pub chart_sigma: LipschitzGraph,
}

/// `θ*(y) = θ̃(y + y₁) - θ̃(y₁)` and `σ*(x) = σ̃(x + y₂) - σ̃(y₂)` on balls of
/// radius `r₀` that stay inside the original domains.
pub fn recenter_at_intersection(
    theta_t: &LipschitzGraph,
    sigma_t: &LipschitzGraph,
    inter: &Intersection,
    tol: f64,
) -> Result<TransversalWitness, TransError> {
    check_shapes(theta_t, sigma_t)?;
    let y1 = DVector::from_column_slice(&inter.y1);
    let y2 = DVector::from_column_slice(&inter.y2);
    let gap_theta = (theta_t.eval(&y1) - &y2).norm();
    let gap_sigma = (sigma_t.eval(&y2) - &y1).norm();
    if gap_theta > tol || gap_sigma > tol {
        return Err(TransError::NotOnBothGraphs { gap_theta, gap_sigma });
    }
    let (lt, ls) = (graph_lip(theta_t), graph_lip(sigma_t));
    if !(lt < 1.0 && ls < 1.0) {
        return Err(TransError::HypothesisFailed { which: "Lip(θ̃) < 1 and Lip(σ̃) < 1".into(), lhs: lt.max(ls), rhs: 1.0 });
    }
    let r0 = (theta_t.radius - y1.amax()).min(sigma_t.radius - y2.amax());
    if !(r0 > 0.0) {
        return Err(TransError::NoRoomToRecenter { r0 });
    }
    let t0 = theta_t.eval(&y1);
    let s0 = sigma_t.eval(&y2);
    let mut chart_theta = LipschitzGraph::from_fn(Grid::new(theta_t.dim_domain(), r0, theta_t.grid.nodes_per_axis)?, theta_t.codim, theta_t.direction, |y| theta_t.eval(&(y + &y1)) - &t0);
    let mut chart_sigma = LipschitzGraph::from_fn(Grid::new(sigma_t.dim_domain(), r0, sigma_t.grid.nodes_per_axis)?, sigma_t.codim, sigma_t.direction, |x| sigma_t.eval(&(x + &y2)) - &s0);
    chart_theta.lip_cert = chart_theta.lip_cert.max(lt);
    chart_sigma.lip_cert = chart_sigma.lip_cert.max(ls);
    Ok(TransversalWitness {
        point: inter.point.clone(),
        dims: (theta_t.dim_domain(), theta_t.codim),
        radius0: r0,
        chart_theta,
        chart_sigma,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TransversalCertificate {
    pub point: Vec<f64>,
    pub holds: bool,
    pub radius: f64,
    pub theta_at_zero: f64,
    pub sigma_at_zero: f64,
    pub lip_theta: f64,
    pub lip_sigma: f64,
}

/// Checks `θ(0) = σ(0) = 0`, `Lip θ < 1`, `Lip σ < 1` for charts over complementary blocks.
pub fn certify_transversal(
    chart_m: &LipschitzGraph,
    chart_n: &LipschitzGraph,
    x0: &[f64],
    tol: f64,
) -> Result<TransversalCertificate, TransError> {
    check_shapes(chart_m, chart_n)?;
    if x0.len() != chart_m.dim_domain() + chart_m.codim {
        return Err(TransError::DecompositionMismatch(format!("point has dimension {}", x0.len())));
    }
    let tz = chart_m.eval(&DVector::zeros(chart_m.dim_domain())).norm();
    let sz = chart_n.eval(&DVector::zeros(chart_n.dim_domain())).norm();
    let (lt, ls) = (graph_lip(chart_m).max(chart_m.lip_cert), graph_lip(chart_n).max(chart_n.lip_cert));
    Ok(TransversalCertificate {
        point: x0.to_vec(),
        holds: tz <= tol && sz <= tol && lt < 1.0 && ls < 1.0,
        radius: chart_m.radius.min(chart_n.radius),
        theta_at_zero: tz,
        sigma_at_zero: sz,
        lip_theta: lt,
        lip_sigma: ls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_transform::Direction;

    fn line(r: f64, n: usize, f: impl Fn(f64) -> f64, dir: Direction) -> LipschitzGraph {
        LipschitzGraph::from_fn(Grid::new(1, r, n).unwrap(), 1, dir, |v| DVector::from_element(1, f(v[0])))
    }

    fn affine_pair() -> (LipschitzGraph, LipschitzGraph) {
        (line(1.0, 201, |y| 0.2 * y + 0.1, Direction::Unstable), line(1.0, 201, |x| 0.3 * x - 0.05, Direction::Stable))
    }

    #[test]
    fn zero_graphs_meet_at_origin() {
        let (t, s) = (line(1.0, 21, |_| 0.0, Direction::Unstable), line(1.0, 21, |_| 0.0, Direction::Stable));
        let i = intersect_graphs(&t, &s, &DVector::zeros(2), None, &IntersectParams::default()).unwrap();
        assert_eq!(i.point, vec![0.0, 0.0]);
    }

    #[test]
    fn affine_fixed_point_closed_form() {
        let (t, s) = affine_pair();
        let i = intersect_graphs(&t, &s, &DVector::zeros(2), None, &IntersectParams::default()).unwrap();
        assert_eq!(i.path, IntersectPath::Contraction);
        assert!((i.y1[0] + 0.02 / 0.94).abs() < 1e-10);
        assert!(i.residual <= 1e-12);
        assert!(uniqueness_spread(&t, &s, &i.y1, 10, 1, &IntersectParams::default()).unwrap() <= 1e-11);
    }

    #[test]
    fn affine_recentering() {
        let (t, s) = affine_pair();
        let i = intersect_graphs(&t, &s, &DVector::zeros(2), None, &IntersectParams::default()).unwrap();
        let w = recenter_at_intersection(&t, &s, &i, 1e-11).unwrap();
        for y in [-0.3, 0.1, 0.5] {
            let v = DVector::from_element(1, y);
            assert!((w.chart_theta.eval(&v)[0] - 0.2 * y).abs() < 1e-12);
            assert!((w.chart_sigma.eval(&v)[0] - 0.3 * y).abs() < 1e-12);
        }
        assert!(certify_transversal(&w.chart_theta, &w.chart_sigma, &w.point, 1e-14).unwrap().holds);
    }

    #[test]
    fn flat_graphs_recentre_to_themselves() {
        let (t, s) = (line(1.0, 21, |y| 0.5 * y, Direction::Unstable), line(1.0, 21, |x| -0.5 * x, Direction::Stable));
        let i = intersect_graphs(&t, &s, &DVector::zeros(2), None, &IntersectParams::default()).unwrap();
        let w = recenter_at_intersection(&t, &s, &i, 1e-12).unwrap();
        assert_eq!(w.radius0, 1.0);
        assert!(w.chart_theta.values.iter().zip(&t.values).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(w.chart_sigma.values.iter().zip(&s.values).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn nonlinear_charts_satisfy_invariants() {
        let t = line(1.0, 401, |y| 0.2 * y.sin() + 0.1, Direction::Unstable);
        let s = line(1.0, 401, |x| 0.3 * x.tanh() - 0.05, Direction::Stable);
        let i = intersect_graphs(&t, &s, &DVector::from_vec(vec![1.0, 2.0]), None, &IntersectParams::default()).unwrap();
        let w = recenter_at_intersection(&t, &s, &i, 1e-11).unwrap();
        assert_eq!(w.chart_theta.origin_value()[0], 0.0);
        assert_eq!(w.chart_sigma.origin_value()[0], 0.0);
        assert!(w.chart_theta.lip_cert < 1.0 && w.chart_sigma.lip_cert < 1.0);
        assert!((i.point[0] - 1.0 - i.y1[0]).abs() < 1e-15);
    }

    #[test]
    fn steep_chart_is_not_transversal() {
        let t = line(1.0, 21, |y| 1.2 * y, Direction::Unstable);
        let s = line(1.0, 21, |_| 0.0, Direction::Stable);
        assert!(!certify_transversal(&t, &s, &[0.0, 0.0], 1e-12).unwrap().holds);
    }

    #[test]
    fn mismatched_decomposition_is_rejected() {
        let t = LipschitzGraph::from_fn(Grid::new(2, 1.0, 5).unwrap(), 1, Direction::Unstable, |_| DVector::zeros(1));
        let s = line(1.0, 5, |_| 0.0, Direction::Stable);
        assert!(matches!(certify_transversal(&t, &s, &[0.0; 3], 1e-12), Err(TransError::DecompositionMismatch(_))));
    }

    #[test]
    fn far_graphs_fail_hypothesis() {
        let t = line(1.0, 21, |_| 0.8, Direction::Unstable);
        let s = line(1.0, 21, |_| 0.0, Direction::Stable);
        let e = intersect_graphs(&t, &s, &DVector::zeros(2), None, &IntersectParams::default()).unwrap_err();
        assert!(matches!(e, TransError::HypothesisFailed { .. }));
    }

    #[test]
    fn grid_path_matches_dense_oracle() {
        let t = line(1.0, 2001, |y| -0.4 * (3.0 * y).sin(), Direction::Unstable);
        let s = line(1.0, 2001, |x| 0.45 * (2.5 * x).sin() + 0.03, Direction::Stable);
        let params = IntersectParams { grid_nodes: 1001, ..Default::default() };
        let i = intersect_graphs(&t, &s, &DVector::zeros(2), None, &params).unwrap();
        assert_eq!(i.path, IntersectPath::Grid);
        assert!(i.lip_theta * i.lip_sigma >= 1.0);
        // Dense oracle: argmin of |g(y) - y| on a ten times finer mesh.
        let n = 10_001;
        let (mut best, mut best_res) = (0.0, f64::INFINITY);
        for k in 0..n {
            let y = -0.5 + k as f64 / (n - 1) as f64;
            let r = (s.eval(&t.eval(&DVector::from_element(1, y)))[0] - y).abs();
            if r < best_res {
                best_res = r;
                best = y;
            }
        }
        assert!((i.y1[0] - best).abs() <= 1.0 / 1000.0);
    }

    #[test]
    fn perturbed_intersection_converges() {
        let (rt, rs) = (line(1.0, 401, |y| 0.2 * y, Direction::Unstable), line(1.0, 401, |x| 0.3 * x, Direction::Stable));
        let c = 0.3;
        let reference = Reference { theta: &rt, sigma: &rs, c };
        let unit = (1.0 - c) * 1.0 / 2.0;
        let mut prev = f64::INFINITY;
        for scale in [0.1, 0.01, 0.001] {
            let e = scale * unit;
            let t = line(1.0, 401, move |y| 0.2 * y + e * (y + 1.0).sin(), Direction::Unstable);
            let s = line(1.0, 401, move |x| 0.3 * x + e * (2.0 * x).cos(), Direction::Stable);
            let i = intersect_graphs(&t, &s, &DVector::zeros(2), Some(&reference), &IntersectParams::default()).unwrap();
            let d = DVector::from_vec(i.point).norm();
            assert!(d < prev);
            prev = d;
        }
    }
}
