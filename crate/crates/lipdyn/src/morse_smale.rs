//! Connection graphs between hyperbolic equilibria, gradient-like and
//! Morse-Smale checks, and the geometric-stability experiment.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_transform::{LipschitzGraph, MapModel, SplitSystem};
use crate::hyperbolicity::{certify_at, CertifyParams, HypError, HyperbolicCertificate};
use crate::perturbation::{continue_with_fallback, ContinuationMethod, ContinuationParams, PertError, PerturbationFamily};
use crate::spectral_split::spectral_norm;

#[derive(Debug, Error)]
pub enum MsError {
    #[error("node {0} is not strongly hyperbolic")]
    NotStrong(usize),
    #[error("isolation balls of nodes {0} and {1} may overlap")]
    BallsOverlap(usize, usize),
    #[error("no orbit from node {node} resolved within {horizon} steps")]
    HorizonExceeded { node: usize, horizon: usize },
    #[error("graphs have {0} and {1} nodes")]
    NodeCountMismatch(usize, usize),
    #[error("node pairing is not a bijection")]
    BadPairing,
    #[error("reference model is not Morse-Smale: {0}")]
    BaseNotMorseSmale(String),
    #[error(transparent)]
    Hyp(#[from] HypError),
    #[error(transparent)]
    Pert(#[from] PertError),
}

/// An equilibrium with its certificate and centred system.
#[derive(Debug, Clone)]
pub struct Certified {
    pub label: String,
    pub cert: HyperbolicCertificate,
    pub sys: SplitSystem,
    /// Local unstable graph; the linear unstable space is used when absent.
    pub unstable_graph: Option<LipschitzGraph>,
}

impl Certified {
    pub fn certify(label: &str, model: &MapModel, x: &DVector<f64>, params: &CertifyParams) -> Result<Self, MsError> {
        let (cert, sys) = certify_at(model, x, params)?;
        Ok(Certified { label: label.to_string(), cert, sys, unstable_graph: None })
    }

    pub fn equilibrium(&self) -> &DVector<f64> {
        &self.sys.base_point
    }

    pub fn dim_u(&self) -> usize {
        self.cert.dim_u
    }

    pub fn ball_radius(&self) -> f64 {
        self.cert.isolation_radius
    }

    /// Adapted-norm distance to the equilibrium.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        self.sys.norm_coords(&self.sys.to_coords(x))
    }

    /// Euclidean radius of a ball containing the isolation ball, from
    /// `|z| <= √2 |z|_adapted` and `|V z| <= |V| |z|`.
    pub fn ambient_radius(&self) -> f64 {
        let s = &self.sys.split;
        let (d, du) = (s.dim(), s.dim_u());
        let mut v = DMatrix::zeros(d, d);
        v.columns_mut(0, du).copy_from(&s.basis_u);
        v.columns_mut(du, d - du).copy_from(&s.basis_s);
        spectral_norm(&v) * 2f64.sqrt() * self.ball_radius()
    }

    /// Points at adapted radius `r` on the local unstable disc.
    fn unstable_mesh(&self, r: f64, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let du = self.dim_u();
        let dirs: Vec<DVector<f64>> = match du {
            0 => Vec::new(),
            1 => vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
            2 => (0..n.max(4))
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / n.max(4) as f64;
                    DVector::from_vec(vec![t.cos(), t.sin()])
                })
                .collect(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n.max(2 * du))
                    .map(|_| DVector::from_fn(du, |_, _| rng.random_range(-1.0..1.0)))
                    .filter(|v| v.norm() > 1e-3)
                    .collect()
            }
        };
        dirs.into_iter()
            .map(|d| {
                let xi = &d * (r / self.sys.norm.norm_u(&d));
                let eta = match &self.unstable_graph {
                    Some(g) => g.eval(&xi),
                    None => DVector::zeros(self.sys.dim_s()),
                };
                self.sys.to_ambient(&self.sys.stack(&xi, &eta))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectionParams {
    /// Mesh size on the unstable sphere when it has dimension at least 2.
    pub mesh: usize,
    /// Adapted radius of the mesh as a fraction of the source isolation radius.
    pub mesh_fraction: f64,
    pub horizon: usize,
    pub k_confirm: usize,
    /// An orbit has settled when `|T(x) - x|` drops below this.
    pub settle_tol: f64,
    pub escape_radius: f64,
    pub seed: u64,
}

impl Default for ConnectionParams {
    fn default() -> Self {
        ConnectionParams { mesh: 16, mesh_fraction: 0.5, horizon: 500, k_confirm: 10, settle_tol: 1e-10, escape_radius: 1e6, seed: 0 }
    }
}

/// Backward-rate data at the head of a witness orbit.
#[derive(Debug, Clone, Serialize)]
pub struct ExitData {
    pub initial_distance: f64,
    /// `d(x₁)/d(x₀)` measured from the source.
    pub first_expansion: f64,
    /// Required expansion `a - 2γ` for backward decay toward the source.
    pub required_expansion: f64,
    pub backward_decay_ok: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TransversalStatus {
    /// The target attracts a full neighbourhood, so its local stable set is open.
    SinkTarget,
    /// Charts of both manifolds are not available at the target.
    NoTransversalityCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConnectionWitness {
    pub orbit: Vec<Vec<f64>>,
    /// First index inside the target isolation ball.
    pub entry_index: usize,
    pub source_exit_data: ExitData,
    /// Largest of the `k_confirm` contraction ratios toward the target.
    pub contraction: f64,
    pub transversal: TransversalStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Fate {
    Confirmed(usize),
    Settled,
    Escaped,
    Unresolved,
}

/// Follows `x` forward until it is confirmed at one of `targets`, settles,
/// escapes or runs out of time. Confirmation means being inside the target
/// ball and strictly approaching the target for `k_confirm` steps, after the
/// orbit has left the source ball.
fn follow(map: &MapModel, x0: &DVector<f64>, source: &Certified, targets: &[(usize, &Certified)], p: &ConnectionParams) -> (Fate, Vec<DVector<f64>>, usize, f64) {
    let mut orbit = vec![x0.clone()];
    let mut left_source = source.distance(x0) >= source.ball_radius();
    let mut streak: Option<(usize, usize, usize, f64)> = None; // (target, entry, count, worst ratio)
    for _ in 0..p.horizon {
        let x = orbit.last().unwrap();
        let y = map.eval(x);
        if !y.iter().all(|v| v.is_finite()) || y.norm() > p.escape_radius {
            return (Fate::Escaped, orbit, 0, 0.0);
        }
        let step = (&y - x).norm();
        orbit.push(y);
        let (x, y) = (&orbit[orbit.len() - 2], &orbit[orbit.len() - 1]);
        if !left_source && source.distance(y) >= source.ball_radius() {
            left_source = true;
        }
        if left_source {
            streak = match streak {
                Some((t, entry, count, worst)) => {
                    let node = targets.iter().find(|(i, _)| *i == t).unwrap().1;
                    let (dx, dy) = (node.distance(x), node.distance(y));
                    if dy < node.ball_radius() && (dy < dx || dy == 0.0) {
                        Some((t, entry, count + 1, worst.max(if dx > 0.0 { dy / dx } else { 0.0 })))
                    } else {
                        None
                    }
                }
                None => targets
                    .iter()
                    .find(|(_, n)| n.distance(y) < n.ball_radius())
                    .map(|(i, _)| (*i, orbit.len() - 1, 0, 0.0)),
            };
            if let Some((t, entry, count, worst)) = streak {
                if count >= p.k_confirm {
                    return (Fate::Confirmed(t), orbit, entry, worst);
                }
            }
        }
        if step < p.settle_tol && streak.is_none() {
            return (Fate::Settled, orbit, 0, 0.0);
        }
    }
    (Fate::Unresolved, orbit, 0, 0.0)
}

fn exit_data(source: &Certified, orbit: &[DVector<f64>]) -> ExitData {
    let d0 = source.distance(&orbit[0]);
    let d1 = orbit.get(1).map(|x| source.distance(x)).unwrap_or(d0);
    let first = if d0 > 0.0 { d1 / d0 } else { f64::INFINITY };
    let required = source.cert.a - 2.0 * source.cert.gamma;
    ExitData { initial_distance: d0, first_expansion: first, required_expansion: required, backward_decay_ok: first >= required }
}

fn transversal_status(target: &Certified) -> TransversalStatus {
    if target.dim_u() == 0 {
        TransversalStatus::SinkTarget
    } else {
        TransversalStatus::NoTransversalityCertificate
    }
}

/// Outcome of probing every mesh orbit of one source.
struct SourceProbe {
    witnesses: Vec<(usize, ConnectionWitness)>,
    unresolved: usize,
}

fn probe_source(map: &MapModel, src_idx: usize, source: &Certified, targets: &[(usize, &Certified)], p: &ConnectionParams) -> SourceProbe {
    let mut out = SourceProbe { witnesses: Vec::new(), unresolved: 0 };
    let r = p.mesh_fraction * source.ball_radius();
    for x0 in source.unstable_mesh(r, p.mesh, p.seed ^ src_idx as u64) {
        let (fate, orbit, entry, contraction) = follow(map, &x0, source, targets, p);
        match fate {
            Fate::Confirmed(t) => {
                if out.witnesses.iter().all(|(u, _)| *u != t) {
                    let target = targets.iter().find(|(i, _)| *i == t).unwrap().1;
                    let w = ConnectionWitness {
                        source_exit_data: exit_data(source, &orbit),
                        orbit: orbit.iter().map(|v| v.iter().copied().collect()).collect(),
                        entry_index: entry,
                        contraction,
                        transversal: transversal_status(target),
                    };
                    out.witnesses.push((t, w));
                }
            }
            Fate::Unresolved => out.unresolved += 1,
            Fate::Settled | Fate::Escaped => {}
        }
    }
    out
}

/// Searches for a connection from `source` to `target`. `Ok(None)` means
/// every mesh orbit was resolved elsewhere (absent at this resolution).
pub fn detect_connection(map: &MapModel, source: &Certified, target: &Certified, params: &ConnectionParams) -> Result<Option<ConnectionWitness>, MsError> {
    if source.dim_u() == 0 {
        return Ok(None);
    }
    let probe = probe_source(map, 0, source, &[(1, target)], params);
    if let Some((_, w)) = probe.witnesses.into_iter().next() {
        return Ok(Some(w));
    }
    if probe.unresolved > 0 {
        return Err(MsError::HorizonExceeded { node: 0, horizon: params.horizon });
    }
    Ok(None)
}

/// Largest iterate count for [`grow_unstable_set`].
pub const N_MAX: usize = 30;

#[derive(Debug, Clone, Serialize)]
pub struct UnstableIterate {
    pub n: usize,
    pub points: Vec<Vec<f64>>,
    /// `ξ ↦ L_u^{-n} P_u Tⁿ(ξ, θ(ξ))` passed the near-identity test, so this
    /// iterate is a graph over the source's unstable space.
    pub chart: bool,
    pub lip_dev: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnstableSet {
    pub iterates: Vec<UnstableIterate>,
    /// First iterate that is only a point cloud.
    pub cloud_from: Option<usize>,
}

impl UnstableSet {
    pub fn all_points(&self) -> Vec<Vec<f64>> {
        self.iterates.iter().flat_map(|it| it.points.iter().cloned()).collect()
    }
}

fn disc_samples(du: usize, r: f64, n: usize, seed: u64) -> Vec<DVector<f64>> {
    match du {
        0 => vec![DVector::zeros(0)],
        1 => (0..n).map(|i| DVector::from_element(1, -r + 2.0 * r * i as f64 / (n - 1).max(1) as f64)).collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let v: DVector<f64> = DVector::from_fn(du, |_, _| rng.random_range(-1.0..1.0));
                    let len = v.norm().max(1e-12);
                    v * (r * rng.random_range(0.0f64..1.0).powf(1.0 / du as f64) / len)
                })
                .collect()
        }
    }
}

/// Forward images of the local unstable disc of `source` (radius
/// `local_radius`, `sampling` samples) for up to [`N_MAX`] iterates. An
/// iterate keeps a chart while its pull-back to the unstable space is a
/// near-identity map; afterwards only the point cloud is kept.
pub fn grow_unstable_set(map: &MapModel, source: &Certified, n_iterations: usize, sampling: usize, seed: u64) -> UnstableSet {
    let sys = &source.sys;
    let du = source.dim_u();
    let r = source.cert.local_radius();
    let xis = disc_samples(du, r, sampling.max(2), seed);
    let lift = |xi: &DVector<f64>| {
        let eta = match &source.unstable_graph {
            Some(g) => g.eval(xi),
            None => DVector::zeros(sys.dim_s()),
        };
        sys.to_ambient(&sys.stack(xi, &eta))
    };
    let mut pts: Vec<DVector<f64>> = xis.iter().map(lift).collect();
    let l_inv = &sys.split.l_u_inv;
    let mut pull = DMatrix::identity(du, du);
    let mut iterates = Vec::new();
    let mut cloud_from = None;
    for n in 1..=n_iterations.min(N_MAX) {
        pts = pts.iter().map(|x| map.eval(x)).collect();
        pull = l_inv * pull;
        let back: Vec<DVector<f64>> = pts.iter().map(|x| &pull * sys.unstack(&sys.to_coords(x)).0).collect();
        let mut lip: f64 = 0.0;
        if du > 0 && cloud_from.is_none() {
            for i in 0..xis.len() {
                for j in (i + 1)..xis.len().min(i + 16) {
                    let dx = (&xis[i] - &xis[j]).norm();
                    if dx > 0.0 {
                        lip = lip.max(((&back[i] - &xis[i]) - (&back[j] - &xis[j])).norm() / dx);
                    }
                }
            }
        }
        let chart = du > 0 && cloud_from.is_none() && lip < 1.0 && lip.is_finite();
        if !chart && cloud_from.is_none() {
            cloud_from = Some(n);
        }
        iterates.push(UnstableIterate { n, points: pts.iter().map(|v| v.iter().copied().collect()).collect(), chart, lip_dev: if chart { lip } else { f64::NAN } });
    }
    UnstableSet { iterates, cloud_from }
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphNode {
    pub id: usize,
    pub label: String,
    pub equilibrium: Vec<f64>,
    pub unstable_dim: usize,
    pub certificate: HyperbolicCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub witness: ConnectionWitness,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairError {
    pub source: usize,
    pub message: String,
}

/// Sampled check that long orbits from a box end near some node.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dg1Params {
    pub center: Vec<f64>,
    pub half_width: f64,
    pub samples: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Dg1Report {
    pub samples: usize,
    pub terminated: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConnectionGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
    /// Acyclic without self-loops.
    pub dg_flag: bool,
    pub cycle: Option<Vec<usize>>,
    pub transitive_closure_ok: bool,
    /// Triples `(i, j, k)` with `i → j → k` but no `i → k`.
    pub transitivity_violations: Vec<(usize, usize, usize)>,
    pub topological_order: Option<Vec<usize>>,
    pub dg1: Option<Dg1Report>,
    pub pair_errors: Vec<PairError>,
}

impl ConnectionGraph {
    pub fn edge_set(&self) -> BTreeSet<(usize, usize)> {
        self.edges.iter().map(|e| (e.source, e.target)).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.iter().any(|e| e.source == i && e.target == j)
    }

    /// Removes the edge `i → j` and refreshes the derived flags.
    pub fn without_edge(&self, i: usize, j: usize) -> ConnectionGraph {
        let mut g = self.clone();
        g.edges.retain(|e| !(e.source == i && e.target == j));
        g.refresh_flags();
        g
    }

    pub fn refresh_flags(&mut self) {
        let n = self.nodes.len();
        let edges: Vec<(usize, usize)> = self.edge_set().into_iter().collect();
        self.cycle = find_cycle(n, &edges);
        self.dg_flag = self.cycle.is_none();
        self.transitivity_violations = transitivity_violations(n, &edges);
        self.transitive_closure_ok = self.transitivity_violations.is_empty();
        self.topological_order = topological_order(n, &edges);
    }

    /// Graphviz rendering with node labels and unstable dimensions.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph connections {\n");
        for n in &self.nodes {
            let _ = writeln!(s, "  n{} [label=\"{} (dim u = {})\"];", n.id, n.label, n.unstable_dim);
        }
        for e in &self.edges {
            let _ = writeln!(s, "  n{} -> n{};", e.source, e.target);
        }
        s.push_str("}\n");
        s
    }
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

/// Depth-first search for a directed cycle; returns its vertices in order.
pub fn find_cycle(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let adj = adjacency(n, edges);
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; n];
    let mut stack: Vec<usize> = Vec::new();
    fn dfs(v: usize, adj: &[Vec<usize>], state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        state[v] = 1;
        stack.push(v);
        for &w in &adj[v] {
            if state[w] == 1 {
                let start = stack.iter().position(|&u| u == w).unwrap();
                return Some(stack[start..].to_vec());
            }
            if state[w] == 0 {
                if let Some(c) = dfs(w, adj, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state[v] = 2;
        None
    }
    (0..n).find_map(|v| if state[v] == 0 { dfs(v, &adj, &mut state, &mut stack) } else { None })
}

/// Every simple cycle, by trying each ordered vertex sequence that starts at
/// its smallest vertex. Exponential; meant for graphs of at most 8 nodes.
pub fn enumerate_simple_cycles(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let set: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
    let mut out = Vec::new();
    fn extend(path: &mut Vec<usize>, n: usize, set: &BTreeSet<(usize, usize)>, out: &mut Vec<Vec<usize>>) {
        let (first, last) = (path[0], *path.last().unwrap());
        if set.contains(&(last, first)) {
            out.push(path.clone());
        }
        for v in (first + 1)..n {
            if !path.contains(&v) && set.contains(&(last, v)) {
                path.push(v);
                extend(path, n, set, out);
                path.pop();
            }
        }
    }
    for s in 0..n {
        extend(&mut vec![s], n, &set, &mut out);
    }
    out
}

pub fn transitivity_violations(n: usize, edges: &[(usize, usize)]) -> Vec<(usize, usize, usize)> {
    let adj = adjacency(n, edges);
    let set: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
    let mut out = Vec::new();
    for i in 0..n {
        for &j in &adj[i] {
            for &k in &adj[j] {
                if i != k && !set.contains(&(i, k)) {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

/// Kahn ordering, or `None` when the graph has a cycle.
pub fn topological_order(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let adj = adjacency(n, edges);
    let mut indeg = vec![0usize; n];
    for a in &adj {
        for &w in a {
            indeg[w] += 1;
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &w in &adj[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.insert(w);
            }
        }
    }
    (order.len() == n).then_some(order)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GraphParams {
    pub connection: ConnectionParams,
}

fn check_nodes(nodes: &[Certified]) -> Result<(), MsError> {
    for (i, n) in nodes.iter().enumerate() {
        if !n.cert.strong_flag {
            return Err(MsError::NotStrong(i));
        }
    }
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            let gap = (nodes[i].equilibrium() - nodes[j].equilibrium()).norm();
            if gap <= nodes[i].ambient_radius() + nodes[j].ambient_radius() {
                return Err(MsError::BallsOverlap(i, j));
            }
        }
    }
    Ok(())
}

fn dg1_check(map: &MapModel, nodes: &[Certified], p: &Dg1Params, k_confirm: usize) -> Dg1Report {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let center = DVector::from_vec(p.center.clone());
    let mut terminated = 0;
    for _ in 0..p.samples {
        let mut x = &center + DVector::from_fn(center.len(), |_, _| rng.random_range(-p.half_width..=p.half_width));
        let mut streak = 0;
        for _ in 0..p.horizon {
            let y = map.eval(&x);
            if !y.iter().all(|v| v.is_finite()) {
                break;
            }
            let inside = nodes.iter().any(|n| {
                let (dx, dy) = (n.distance(&x), n.distance(&y));
                dy < n.ball_radius() && dy <= dx
            });
            streak = if inside { streak + 1 } else { 0 };
            x = y;
            if streak >= k_confirm {
                terminated += 1;
                break;
            }
        }
    }
    Dg1Report { samples: p.samples, terminated, pass: terminated == p.samples }
}

/// Probes every source with its unstable mesh and records the first node
/// each mesh orbit is confirmed at.
pub fn build_connection_graph(map: &MapModel, nodes: &[Certified], params: &ConnectionParams, dg1: Option<&Dg1Params>) -> Result<ConnectionGraph, MsError> {
    check_nodes(nodes)?;
    let targets: Vec<(usize, &Certified)> = nodes.iter().enumerate().collect();
    let mut edges = Vec::new();
    let mut pair_errors = Vec::new();
    for (i, src) in nodes.iter().enumerate() {
        if src.dim_u() == 0 {
            continue;
        }
        let probe = probe_source(map, i, src, &targets, params);
        for (t, w) in probe.witnesses {
            edges.push(Edge { source: i, target: t, witness: w });
        }
        if probe.unresolved > 0 {
            pair_errors.push(PairError { source: i, message: MsError::HorizonExceeded { node: i, horizon: params.horizon }.to_string() });
        }
    }
    edges.sort_by_key(|e| (e.source, e.target));
    let mut g = ConnectionGraph {
        nodes: nodes
            .iter()
            .enumerate()
            .map(|(id, n)| GraphNode {
                id,
                label: n.label.clone(),
                equilibrium: n.equilibrium().iter().copied().collect(),
                unstable_dim: n.dim_u(),
                certificate: n.cert.clone(),
            })
            .collect(),
        edges,
        dg_flag: false,
        cycle: None,
        transitive_closure_ok: false,
        transitivity_violations: Vec::new(),
        topological_order: None,
        dg1: dg1.map(|p| dg1_check(map, nodes, p, params.k_confirm)),
        pair_errors,
    };
    g.refresh_flags();
    Ok(g)
}

/// Recomputes a witness orbit from its first point; returns the largest deviation.
pub fn witness_replay_error(map: &MapModel, w: &ConnectionWitness) -> f64 {
    let mut x = DVector::from_vec(w.orbit[0].clone());
    let mut worst: f64 = 0.0;
    for stored in &w.orbit[1..] {
        x = map.eval(&x);
        worst = worst.max((&x - DVector::from_vec(stored.clone())).norm());
    }
    worst
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub enum PresentIn {
    #[serde(rename = "A-only")]
    AOnly,
    #[serde(rename = "B-only")]
    BOnly,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct Discrepancy {
    /// Node indices in graph A.
    pub i: usize,
    pub j: usize,
    pub present_in: PresentIn,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub equivalent: bool,
    pub discrepancies: Vec<Discrepancy>,
}

/// Compares edge sets under `pairing` (A-node `i` ↔ B-node `pairing[i]`,
/// identity by default).
pub fn check_geometric_equivalence(a: &ConnectionGraph, b: &ConnectionGraph, pairing: Option<&[usize]>) -> Result<EquivalenceReport, MsError> {
    let n = a.nodes.len();
    if n != b.nodes.len() {
        return Err(MsError::NodeCountMismatch(n, b.nodes.len()));
    }
    let pairing: Vec<usize> = pairing.map(|p| p.to_vec()).unwrap_or_else(|| (0..n).collect());
    let image: BTreeSet<usize> = pairing.iter().copied().collect();
    if pairing.len() != n || image.len() != n || image.iter().any(|&v| v >= n) {
        return Err(MsError::BadPairing);
    }
    let mut inverse = vec![0; n];
    for (i, &p) in pairing.iter().enumerate() {
        inverse[p] = i;
    }
    let ea = a.edge_set();
    let eb: BTreeSet<(usize, usize)> = b.edge_set().into_iter().map(|(i, j)| (inverse[i], inverse[j])).collect();
    let mut discrepancies: Vec<Discrepancy> = ea.difference(&eb).map(|&(i, j)| Discrepancy { i, j, present_in: PresentIn::AOnly }).collect();
    discrepancies.extend(eb.difference(&ea).map(|&(i, j)| Discrepancy { i, j, present_in: PresentIn::BOnly }));
    Ok(EquivalenceReport { equivalent: discrepancies.is_empty(), discrepancies })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StabilityConfig {
    /// Certificates for the connection graph; small balls so they are strong.
    pub isolation: CertifyParams,
    /// Certificates used to continue equilibria; may be merely weak.
    pub continuation_cert: CertifyParams,
    pub continuation: ContinuationParams,
    pub connection: ConnectionParams,
    pub invertibility: Invertibility,
}

/// How local invertibility of the maps near the equilibria is established.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Invertibility {
    /// The derivative at every base node must have a positive smallest
    /// singular value.
    #[default]
    DerivativeSvd,
    /// The map is a composition of steps `x ↦ D(x + K(x))` with `D`
    /// invertible; `bound` is a Lipschitz bound for `K`, computed by the
    /// caller, and must be below 1.
    StepBound { bound: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRow {
    pub eta: f64,
    pub stage: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationRecord {
    pub eta: f64,
    pub node: usize,
    pub method: ContinuationMethod,
    /// Adapted-norm distance from the base equilibrium.
    pub displacement: f64,
    /// The failed precondition when Newton was used.
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub base_graph: ConnectionGraph,
    pub graphs: Vec<(f64, ConnectionGraph)>,
    pub rows: Vec<StageRow>,
    pub continuation: Vec<ContinuationRecord>,
    /// Largest `η` at which every stage passed.
    pub max_equivalent_eta: Option<f64>,
}

fn morse_smale_defects(g: &ConnectionGraph) -> Vec<String> {
    let mut out = Vec::new();
    if !g.dg_flag {
        out.push(format!("cycle {:?}", g.cycle));
    }
    if !g.transitive_closure_ok {
        out.push(format!("transitivity violations {:?}", g.transitivity_violations));
    }
    if let Some(d) = &g.dg1 {
        if !d.pass {
            out.push(format!("{} of {} sampled orbits unresolved", d.samples - d.terminated, d.samples));
        }
    }
    if !g.pair_errors.is_empty() {
        out.push(format!("{} probe errors", g.pair_errors.len()));
    }
    if g.edges.iter().any(|e| e.witness.transversal == TransversalStatus::NoTransversalityCertificate) {
        out.push("edge without transversality certificate".into());
    }
    out
}

/// Local bi-Lipschitz check. Parabolic time-one maps have singular values
/// like `e^{-k²}` that underflow, so those use [`Invertibility::StepBound`].
fn bilipschitz_defect(model: &MapModel, nodes: &[Certified], how: Invertibility) -> Option<String> {
    match how {
        Invertibility::DerivativeSvd => nodes.iter().enumerate().find_map(|(i, n)| {
            let sv = model.jacobian_at(n.equilibrium()).singular_values();
            (!(sv.min() > 0.0)).then(|| format!("derivative singular at node {i}"))
        }),
        Invertibility::StepBound { bound } => (!(bound < 1.0)).then(|| format!("step perturbation bound {bound} is not below 1")),
    }
}

/// Continues the base equilibria along `family`, rebuilds the connection graph
/// at every `η` and compares it with the graph of `family.models[0]`.
pub fn run_stability_experiment(family: &PerturbationFamily, base: &[(String, DVector<f64>)], config: &StabilityConfig, dg1: Option<&Dg1Params>) -> Result<StabilityReport, MsError> {
    let model0 = &family.models[0];
    let mut iso = Vec::new();
    let mut cont = Vec::new();
    for (label, x) in base {
        iso.push(Certified::certify(label, model0, x, &config.isolation)?);
        cont.push(certify_at(model0, x, &config.continuation_cert)?);
    }
    let base_graph = build_connection_graph(model0, &iso, &config.connection, dg1)?;
    let mut defects = morse_smale_defects(&base_graph);
    defects.extend(bilipschitz_defect(model0, &iso, config.invertibility));
    if !defects.is_empty() {
        return Err(MsError::BaseNotMorseSmale(defects.join("; ")));
    }
    let base_edges = base_graph.edge_set();
    let mut rows = Vec::new();
    let mut graphs = Vec::new();
    let mut max_eta: Option<f64> = None;
    let mut continuation = Vec::new();
    for (k, (&eta, model)) in family.eta_values.iter().zip(&family.models).enumerate().skip(1) {
        let mut row = |stage: &str, pass: bool, detail: String| rows.push(StageRow { eta, stage: stage.into(), pass, detail });
        let mut points = Vec::new();
        let mut failed = None;
        let mut fallbacks = Vec::new();
        for (i, (cert, sys)) in cont.iter().enumerate() {
            let params = ContinuationParams { seed: config.continuation.seed + k as u64, ..config.continuation };
            let (x, method, detail) = match continue_with_fallback(sys, cert, model, &params) {
                Ok(v) => v,
                Err(e) => {
                    failed = Some(format!("node {i}: {e}"));
                    break;
                }
            };
            if method == ContinuationMethod::Newton {
                fallbacks.push(i);
            }
            continuation.push(ContinuationRecord { eta, node: i, method, displacement: sys.norm_coords(&sys.to_coords(&x)), detail });
            points.push(x);
        }
        if let Some(d) = failed {
            row("continue", false, d);
            continue;
        }
        let note = if fallbacks.is_empty() { String::new() } else { format!("; Newton fallback at nodes {fallbacks:?}") };
        row("continue", true, format!("{} equilibria{note}", points.len()));
        let mut nodes = Vec::new();
        for ((label, _), x) in base.iter().zip(&points) {
            match Certified::certify(label, model, x, &config.isolation) {
                Ok(c) if c.cert.strong_flag => nodes.push(c),
                Ok(_) => {
                    failed = Some(format!("{label}: not strong"));
                    break;
                }
                Err(e) => {
                    failed = Some(format!("{label}: {e}"));
                    break;
                }
            }
        }
        if let Some(d) = failed {
            row("certify", false, d);
            continue;
        }
        row("certify", true, String::new());
        let graph = match build_connection_graph(model, &nodes, &config.connection, dg1) {
            Ok(g) => g,
            Err(e) => {
                row("graph", false, e.to_string());
                continue;
            }
        };
        let defects = morse_smale_defects(&graph);
        row("graph", defects.is_empty(), defects.join("; "));
        let new_edges: Vec<_> = graph.edge_set().difference(&base_edges).copied().collect();
        row("no-new-connections", new_edges.is_empty(), format!("{new_edges:?}"));
        let eq = check_geometric_equivalence(&base_graph, &graph, None)?;
        row("equivalence", eq.equivalent, format!("{:?}", eq.discrepancies));
        let all = rows.iter().filter(|r| r.eta == eta).all(|r| r.pass);
        if all {
            max_eta = Some(max_eta.map_or(eta, |m: f64| m.max(eta)));
        }
        graphs.push((eta, graph));
    }
    Ok(StabilityReport { base_graph, graphs, rows, continuation, max_equivalent_eta: max_eta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperbolicity::LipMethod;
    use crate::models;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn cert_params(delta: f64) -> CertifyParams {
        CertifyParams { delta, lip_method: LipMethod::Pairs(20_000), ..Default::default() }
    }

    fn bistable_nodes(model: &MapModel) -> Vec<Certified> {
        vec![
            Certified::certify("0", model, &DVector::from_element(1, 0.0), &cert_params(0.3)).unwrap(),
            Certified::certify("+1", model, &DVector::from_element(1, 1.0), &cert_params(0.3)).unwrap(),
            Certified::certify("-1", model, &DVector::from_element(1, -1.0), &cert_params(0.3)).unwrap(),
        ]
    }

    fn bistable_dg1() -> Dg1Params {
        Dg1Params { center: vec![0.0], half_width: 1.5, samples: 50, horizon: 500, seed: 1 }
    }

    #[test]
    fn linear_saddle_unstable_set_is_a_line() {
        let m = models::linear(dmatrix![2.0, 0.0; 0.0, 0.5]);
        let src = Certified::certify("0", &m, &DVector::zeros(2), &cert_params(0.5)).unwrap();
        let set = grow_unstable_set(&m, &src, 10, 21, 0);
        assert_eq!(set.iterates.len(), 10);
        assert!(set.all_points().iter().all(|p| p[1].abs() < 1e-14));
        assert!(set.iterates.iter().all(|it| it.chart && it.lip_dev < 1e-12));
    }

    #[test]
    fn bistable_unstable_set_fills_interval() {
        let m = models::bistable_pl(0.0);
        let src = bistable_nodes(&m).remove(0);
        let set = grow_unstable_set(&m, &src, 30, 201, 0);
        let mut xs: Vec<f64> = set.all_points().iter().map(|p| p[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(xs.iter().all(|x| x.abs() <= 1.0 + 1e-12));
        assert!(1.0 - xs.last().unwrap() < 1e-6 && xs[0] + 1.0 < 1e-6);
        let gap = xs.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        assert!(gap < 0.05, "{gap}");
        assert!(set.cloud_from.is_some());
    }

    #[test]
    fn planar_unstable_set_matches_simulation() {
        let m = models::planar_gradient(0.4, 0.4, 0.3);
        let src = Certified::certify("0", &m, &DVector::zeros(2), &cert_params(0.02)).unwrap();
        let set = grow_unstable_set(&m, &src, 30, 101, 0);
        let mut oracle: Vec<(f64, f64)> = Vec::new();
        for k in 0..400 {
            let s = 1e-9 * 10f64.powf(3.0 * k as f64 / 400.0);
            for sign in [1.0, -1.0] {
                let mut x = DVector::from_vec(vec![sign * s, 0.0]);
                for _ in 0..80 {
                    x = m.eval(&x);
                    oracle.push((x[0], x[1]));
                }
            }
        }
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let h = |x: f64| {
            let i = oracle.partition_point(|p| p.0 < x).clamp(1, oracle.len() - 1);
            let (p, q) = (oracle[i - 1], oracle[i]);
            if q.0 > p.0 { p.1 + (q.1 - p.1) * (x - p.0) / (q.0 - p.0) } else { p.1 }
        };
        let worst = set.all_points().iter().map(|p| (p[1] - h(p[0])).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn sinks_have_no_connection() {
        let m = models::bistable_pl(0.0);
        let nodes = bistable_nodes(&m);
        assert!(detect_connection(&m, &nodes[1], &nodes[2], &ConnectionParams::default()).unwrap().is_none());
    }

    #[test]
    fn single_sink_graph() {
        let m = models::linear(dmatrix![0.5]);
        let n = Certified::certify("0", &m, &DVector::zeros(1), &cert_params(0.5)).unwrap();
        let g = build_connection_graph(&m, &[n], &ConnectionParams::default(), None).unwrap();
        assert!(g.edges.is_empty() && g.dg_flag && g.transitive_closure_ok);
    }

    #[test]
    fn bistable_graph_matches_interval_dynamics() {
        let m = models::bistable_pl(0.0);
        let g = build_connection_graph(&m, &bistable_nodes(&m), &ConnectionParams::default(), Some(&bistable_dg1())).unwrap();
        assert_eq!(g.edge_set(), BTreeSet::from([(0, 1), (0, 2)]));
        assert!(g.dg_flag && g.transitive_closure_ok);
        assert!(g.dg1.as_ref().unwrap().pass);
        assert_eq!(g.topological_order.as_ref().unwrap()[0], 0);
        for e in &g.edges {
            assert_eq!(witness_replay_error(&m, &e.witness), 0.0);
            assert!(e.witness.source_exit_data.backward_decay_ok);
            assert!(e.witness.contraction < 1.0);
            assert_eq!(e.witness.transversal, TransversalStatus::SinkTarget);
        }
    }

    #[test]
    fn planar_saddle_to_sink_enters_quickly() {
        let m = models::planar_gradient(0.4, 0.4, 0.3);
        let [s1, _] = models::planar_gradient_sinks(0.4, 0.3);
        let src = Certified::certify("0", &m, &DVector::zeros(2), &cert_params(0.02)).unwrap();
        let dst = Certified::certify("+", &m, &s1, &cert_params(0.005)).unwrap();
        let w = detect_connection(&m, &src, &dst, &ConnectionParams::default()).unwrap().unwrap();
        assert!(w.entry_index < 40, "{}", w.entry_index);
    }

    #[test]
    fn replicator_cycle_is_not_gradient() {
        let m = models::replicator_cycle();
        let nodes: Vec<_> = models::replicator_vertices().iter().enumerate().map(|(i, v)| Certified::certify(&format!("e{}", i + 1), &m, v, &cert_params(0.002)).unwrap()).collect();
        let g = build_connection_graph(&m, &nodes, &ConnectionParams::default(), None).unwrap();
        assert_eq!(g.edge_set(), BTreeSet::from([(0, 1), (1, 2), (2, 0)]));
        assert!(!g.dg_flag);
        let mut cyc = g.cycle.clone().unwrap();
        let start = cyc.iter().position(|&v| v == 0).unwrap();
        cyc.rotate_left(start);
        assert_eq!(cyc, vec![0, 1, 2]);
        assert!(g.topological_order.is_none());
    }

    #[test]
    fn edge_deletion_breaks_equivalence() {
        let m = models::bistable_pl(0.0);
        let g = build_connection_graph(&m, &bistable_nodes(&m), &ConnectionParams::default(), None).unwrap();
        assert!(check_geometric_equivalence(&g, &g, None).unwrap().equivalent);
        let cut = g.without_edge(0, 1);
        let rep = check_geometric_equivalence(&g, &cut, None).unwrap();
        assert!(!rep.equivalent);
        assert_eq!(rep.discrepancies, vec![Discrepancy { i: 0, j: 1, present_in: PresentIn::AOnly }]);
        let swapped = check_geometric_equivalence(&g, &g, Some(&[0, 2, 1])).unwrap();
        assert!(swapped.equivalent);
        let mut small = g.clone();
        small.nodes.pop();
        assert!(matches!(check_geometric_equivalence(&g, &small, None), Err(MsError::NodeCountMismatch(3, 2))));
    }

    #[test]
    fn dot_lists_nodes_and_edges() {
        let m = models::bistable_pl(0.0);
        let g = build_connection_graph(&m, &bistable_nodes(&m), &ConnectionParams::default(), None).unwrap();
        let dot = g.to_dot();
        assert!(dot.contains("n0 -> n1;") && dot.contains("n0 -> n2;"));
    }

    fn stability_config() -> StabilityConfig {
        StabilityConfig {
            isolation: cert_params(0.3),
            continuation_cert: cert_params(0.3),
            continuation: ContinuationParams { n_pairs: 20_000, ..Default::default() },
            connection: ConnectionParams::default(),
            invertibility: Invertibility::DerivativeSvd,
        }
    }

    fn bistable_base() -> Vec<(String, DVector<f64>)> {
        vec![("0".into(), DVector::from_element(1, 0.0)), ("+1".into(), DVector::from_element(1, 1.0)), ("-1".into(), DVector::from_element(1, -1.0))]
    }

    #[test]
    fn bistable_sine_family_is_stable() {
        let etas = vec![0.0, 0.01, 0.05];
        let models: Vec<_> = etas.iter().map(|&e| models::bistable_pl(e)).collect();
        let fam = PerturbationFamily::new(etas, models).unwrap();
        let rep = run_stability_experiment(&fam, &bistable_base(), &stability_config(), Some(&bistable_dg1())).unwrap();
        assert!(rep.rows.iter().all(|r| r.pass), "{:#?}", rep.rows);
        assert_eq!(rep.max_equivalent_eta, Some(0.05));
    }

    #[test]
    fn constant_family_is_stable() {
        let etas = vec![0.0, 0.1, 0.2];
        let models: Vec<_> = etas.iter().map(|_| models::bistable_pl(0.0)).collect();
        let fam = PerturbationFamily::new(etas, models).unwrap();
        let rep = run_stability_experiment(&fam, &bistable_base(), &stability_config(), None).unwrap();
        assert_eq!(rep.max_equivalent_eta, Some(0.2));
    }

    #[test]
    fn cyclic_base_is_rejected() {
        let etas = vec![0.0, 0.01];
        let models: Vec<_> = etas.iter().map(|_| models::replicator_cycle()).collect();
        let fam = PerturbationFamily::new(etas, models).unwrap();
        let base: Vec<_> = models::replicator_vertices().iter().enumerate().map(|(i, v)| (format!("e{i}"), v.clone())).collect();
        let cfg = StabilityConfig { isolation: cert_params(0.002), continuation_cert: cert_params(0.002), ..stability_config() };
        assert!(matches!(run_stability_experiment(&fam, &base, &cfg, None), Err(MsError::BaseNotMorseSmale(_))));
    }

    #[test]
    fn dfs_and_brute_force_agree_on_examples() {
        let cases: Vec<(usize, Vec<(usize, usize)>)> = vec![
            (3, vec![(0, 1), (1, 2), (2, 0)]),
            (3, vec![(0, 1), (0, 2)]),
            (1, vec![(0, 0)]),
            (4, vec![(0, 1), (1, 2), (2, 3), (3, 1)]),
        ];
        for (n, e) in cases {
            assert_eq!(find_cycle(n, &e).is_some(), !enumerate_simple_cycles(n, &e).is_empty());
        }
    }

    proptest! {
        #[test]
        fn dfs_matches_brute_force(n in 1usize..=8, raw in proptest::collection::vec((0usize..8, 0usize..8), 0..20)) {
            let edges: Vec<_> = raw.into_iter().map(|(i, j)| (i % n, j % n)).collect();
            let dfs = find_cycle(n, &edges);
            let all = enumerate_simple_cycles(n, &edges);
            prop_assert_eq!(dfs.is_some(), !all.is_empty());
            if let Some(c) = dfs {
                let set: BTreeSet<_> = edges.iter().copied().collect();
                for k in 0..c.len() {
                    prop_assert!(set.contains(&(c[k], c[(k + 1) % c.len()])));
                }
            }
            prop_assert_eq!(topological_order(n, &edges).is_some(), all.is_empty());
        }

        #[test]
        fn equivalence_is_reflexive_and_detects_removals(n in 2usize..=6, raw in proptest::collection::vec((0usize..6, 0usize..6), 1..12)) {
            let edges: BTreeSet<_> = raw.into_iter().map(|(i, j)| (i % n, j % n)).filter(|(i, j)| i != j).collect();
            prop_assume!(!edges.is_empty());
            let g = synthetic_graph(n, &edges);
            prop_assert!(check_geometric_equivalence(&g, &g, None).unwrap().equivalent);
            let &(i, j) = edges.iter().next().unwrap();
            let rep = check_geometric_equivalence(&g, &g.without_edge(i, j), None).unwrap();
            prop_assert_eq!(rep.discrepancies, vec![Discrepancy { i, j, present_in: PresentIn::AOnly }]);
        }
    }

    fn synthetic_graph(n: usize, edges: &BTreeSet<(usize, usize)>) -> ConnectionGraph {
        let m = models::linear(dmatrix![0.5]);
        let c = Certified::certify("s", &m, &DVector::zeros(1), &cert_params(0.5)).unwrap();
        let node = |id| GraphNode { id, label: format!("{id}"), equilibrium: vec![0.0], unstable_dim: 0, certificate: c.cert.clone() };
        let witness = ConnectionWitness {
            orbit: vec![vec![0.0]],
            entry_index: 0,
            source_exit_data: ExitData { initial_distance: 0.0, first_expansion: 0.0, required_expansion: 0.0, backward_decay_ok: true },
            contraction: 0.0,
            transversal: TransversalStatus::SinkTarget,
        };
        let mut g = ConnectionGraph {
            nodes: (0..n).map(node).collect(),
            edges: edges.iter().map(|&(i, j)| Edge { source: i, target: j, witness: witness.clone() }).collect(),
            dg_flag: false,
            cycle: None,
            transitive_closure_ok: false,
            transitivity_violations: Vec::new(),
            topological_order: None,
            dg1: None,
            pair_errors: Vec::new(),
        };
        g.refresh_flags();
        g
    }
}
