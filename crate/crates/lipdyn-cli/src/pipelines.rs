//! One function per pipeline: run it, write its artifacts, return its checks.

use lipdyn::chafee_infante::{chafee_stability, nemytskii_remainder_diagnostic, profile, verify_equilibrium_count, ChafeeConfig, CiError, CountRow};
use lipdyn::graph_transform::{compute_invariant_graph, verify_graph, Direction, LipschitzGraph, VerifyParams};
use lipdyn::hyperbolicity::{certify_at, CertifyParams};
use lipdyn::morse_smale::{build_connection_graph, run_stability_experiment, Certified, ConnectionGraph, Invertibility, StabilityConfig};
use lipdyn::perturbation::track_equilibrium_family;
use lipdyn::spectral_split::{build_adapted_norm, canonical_norm, eigenvalue_moduli, split_spectrum_with};
use lipdyn::transversality::{certify_transversal, intersect_graphs, recenter_at_intersection, uniqueness_spread, IntersectParams};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::artifacts::{Artifacts, Check};
use crate::config::{
    CertifyRunParams, ChafeeParams, ContinueParams, ManifoldParams, MorseSmaleParams, NemytskiiParams, Pipeline, Scenario, SplitParams, StabilityParams, TransversalParams,
};
use crate::CliError;

fn stage<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Pipeline(format!("{what}: {e}"))
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

pub fn run(s: &Scenario, seed: u64, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    match s.config.pipeline {
        Pipeline::Split => split(s, out),
        Pipeline::Manifold => manifold(s, seed, out),
        Pipeline::Certify => certify(s, seed, out),
        Pipeline::Continue => continuation(s, seed, out),
        Pipeline::Transversal => transversal(s, seed, out),
        Pipeline::MorseSmale => morse_smale(s, seed, out),
        Pipeline::Stability => stability(s, seed, out),
        Pipeline::Chafee => chafee(s, seed, out),
        Pipeline::Nemytskii => nemytskii(s, out),
    }
}

#[derive(Serialize)]
struct NormReport {
    rate_u: f64,
    rate_s: f64,
    depth_u: usize,
    depth_s: usize,
    equiv_lo: f64,
    equiv_hi: f64,
}

#[derive(Serialize)]
struct SplitReport {
    x_star: Vec<f64>,
    rho: f64,
    dim_u: usize,
    dim_s: usize,
    a: f64,
    b: f64,
    eigenvalue_moduli: Vec<f64>,
    min_unstable_modulus: f64,
    max_stable_modulus: f64,
    projection_residual: f64,
    resolvent_bound: Option<f64>,
    basis_u: Vec<Vec<f64>>,
    basis_s: Vec<Vec<f64>>,
    norm: NormReport,
}

fn split(s: &Scenario, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: SplitParams = s.params()?;
    let model = s.build_model()?;
    let x = DVector::from_vec(p.point(Some(model.dim())));
    let sp = &s.config.split;
    let jac = model.jacobian_at(&x);
    let split = split_spectrum_with(&jac, sp.rho, sp.gap_tol, sp.margin_fraction).map_err(stage("split"))?;
    let norm = match (sp.a, sp.b) {
        (None, None) => canonical_norm(&split),
        (a, b) => build_adapted_norm(
            &split,
            a.unwrap_or(if split.dim_u() > 0 { split.a } else { f64::INFINITY }),
            b.unwrap_or(if split.dim_s() > 0 { split.b } else { 0.0 }),
        ),
    }
    .map_err(stage("adapted norm"))?;
    let (a, b) = (sp.a.unwrap_or(split.a), sp.b.unwrap_or(split.b));
    let residual = split.residuals().max();
    let report = SplitReport {
        x_star: x.iter().copied().collect(),
        rho: split.rho,
        dim_u: split.dim_u(),
        dim_s: split.dim_s(),
        a,
        b,
        eigenvalue_moduli: eigenvalue_moduli(&jac).map_err(stage("eigenvalues"))?,
        min_unstable_modulus: split.min_unstable_modulus,
        max_stable_modulus: split.max_stable_modulus,
        projection_residual: residual,
        resolvent_bound: lipdyn::spectral_split::resolvent_bound(a, b).ok(),
        basis_u: columns(&split.basis_u),
        basis_s: columns(&split.basis_s),
        norm: NormReport { rate_u: norm.rate_u, rate_s: norm.rate_s, depth_u: norm.depth_u, depth_s: norm.depth_s, equiv_lo: norm.equiv_lo, equiv_hi: norm.equiv_hi },
    };
    out.write_json("split.json", &report)?;
    Ok(vec![
        Check::at_most("split", "projection residual", residual, s.config.tolerances.projection),
        Check { family: "split".into(), name: "b < 1".into(), value: b, limit: 1.0, pass: b < 1.0 },
        Check { family: "split".into(), name: "1 < a".into(), value: 1.0, limit: a, pass: 1.0 < a },
    ])
}

fn seeded(c: &CertifyParams, seed: u64, eq_tol: f64) -> CertifyParams {
    CertifyParams { seed, eq_tol, ..*c }
}

fn dir_name(d: Direction) -> &'static str {
    match d {
        Direction::Unstable => "unstable",
        Direction::Stable => "stable",
    }
}

/// Rows `(domain coordinates..., values...)` of every grid node.
fn graph_rows(g: &LipschitzGraph) -> Vec<Vec<f64>> {
    (0..g.grid.len())
        .map(|i| {
            let mut r: Vec<f64> = g.grid.node(i).iter().copied().collect();
            r.extend(g.node_value(i).iter());
            r
        })
        .collect()
}

fn dat_columns(g: &LipschitzGraph) -> Vec<String> {
    let (dom, val) = match g.direction {
        Direction::Unstable => ("xi", "theta"),
        Direction::Stable => ("eta", "sigma"),
    };
    let mut cols: Vec<String> = (0..g.dim_domain()).map(|k| format!("{dom}{k}")).collect();
    cols.extend((0..g.codim).map(|k| format!("{val}{k}")));
    cols
}

fn manifold(s: &Scenario, seed: u64, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: ManifoldParams = s.params()?;
    let tol = &s.config.tolerances;
    let model = s.build_model()?;
    let x = DVector::from_vec(p.point(Some(model.dim())));
    let (cert, sys) = certify_at(&model, &x, &seeded(&p.certify, seed, tol.equilibrium)).map_err(stage("certify"))?;
    out.write_json("certificate.json", &cert)?;
    let mut checks = Vec::new();
    for &dir in &p.directions {
        let name = dir_name(dir);
        let fam = format!("manifold_{name}");
        let g = compute_invariant_graph(&sys, dir, &p.graph).map_err(stage("graph transform"))?;
        let vp = VerifyParams { n_probe: p.n_probe, orbit_steps: p.orbit_steps, seed, tol: tol.rho_star, rate_slack: tol.rate_slack, rho_shift: p.rho_shift, graph: p.graph };
        let rep = verify_graph(&sys, &g, &vp).map_err(stage("verify"))?;
        let cols = dat_columns(&g);
        out.write_json(&format!("graph_{name}.json"), &g)?;
        out.write_dat(&format!("manifold_{name}.dat"), &cols.iter().map(String::as_str).collect::<Vec<_>>(), &graph_rows(&g))?;
        out.write_json(&format!("verify_{name}.json"), &rep)?;
        let d = &g.diagnostics;
        checks.push(Check::at_most(&fam, "contraction factor", d.contraction_factor, d.contraction_bound));
        checks.push(Check::at_most(&fam, "lipschitz constant", g.lip_cert, d.lip_bound));
        checks.push(Check::at_most(&fam, "invariance residual", rep.invariance_residual, tol.invariance));
        checks.push(Check { family: fam.clone(), name: "per-step rate".into(), value: rep.rate_factor, limit: rep.rate_bound, pass: rep.rate_check });
        if let Some(diff) = rep.rho_star_diff {
            checks.push(Check::at_most(&fam, "rho robustness", diff, tol.rho_star));
        }
    }
    Ok(checks)
}

fn certify(s: &Scenario, seed: u64, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: CertifyRunParams = s.params()?;
    let model = s.build_model()?;
    let x = DVector::from_vec(p.point(Some(model.dim())));
    let (cert, _) = certify_at(&model, &x, &seeded(&p.certify, seed, s.config.tolerances.equilibrium)).map_err(stage("certify"))?;
    out.write_json("certificate.json", &cert)?;
    let mut checks: Vec<Check> = cert.inequalities.iter().map(|i| Check { family: "certificate".into(), name: i.name.clone(), value: i.lhs, limit: i.rhs, pass: i.holds }).collect();
    checks.push(Check::flag("certificate", "weakly hyperbolic", cert.weak_flag));
    if p.require_strong {
        checks.push(Check { family: "certificate".into(), name: "gamma < gamma1".into(), value: cert.gamma, limit: cert.gamma1_threshold, pass: cert.strong_flag });
    }
    Ok(checks)
}

#[derive(Serialize)]
struct ContinuationCsvRow {
    eta: f64,
    equilibrium_id: usize,
    x_star: String,
    displacement: f64,
    residual: f64,
    bound: f64,
    pass: bool,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| crate::artifacts::fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

fn continuation(s: &Scenario, seed: u64, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: ContinueParams = s.params()?;
    let spec = s.model()?;
    let fam = p.family.build(spec).map_err(stage("family"))?;
    let base = &fam.models[0];
    let cert = seeded(&p.certify, seed, s.config.tolerances.equilibrium);
    let bases = p
        .equilibria
        .iter()
        .map(|x| certify_at(base, &DVector::from_column_slice(x), &cert))
        .collect::<Result<Vec<_>, _>>()
        .map_err(stage("certify"))?;
    let cont = lipdyn::perturbation::ContinuationParams { seed, fp_tol: s.config.tolerances.fixed_point, ..p.continuation };
    let table = track_equilibrium_family(&fam, &bases, &cont).map_err(stage("continuation"))?;
    out.write_json("continuation.json", &table)?;
    let rows: Vec<ContinuationCsvRow> = table
        .rows
        .iter()
        .map(|r| ContinuationCsvRow { eta: r.eta, equilibrium_id: r.equilibrium_id, x_star: join(&r.x_star), displacement: r.displacement, residual: r.residual, bound: r.bound, pass: r.pass })
        .collect();
    out.write_csv("continuation.csv", &rows, &["eta", "equilibrium_id", "x_star", "displacement", "residual", "bound", "pass"])?;
    let mut checks: Vec<Check> = table
        .rows
        .iter()
        .map(|r| Check { family: "continuation".into(), name: format!("eta={} node={} displacement", r.eta, r.equilibrium_id), value: r.displacement, limit: r.bound, pass: r.pass })
        .collect();
    for &(eta, count) in &table.counts {
        if eta <= table.eta_certified_max {
            checks.push(Check { family: "continuation".into(), name: format!("eta={eta} equilibrium count"), value: count as f64, limit: bases.len() as f64, pass: count == bases.len() });
        }
    }
    checks.push(Check::flag("continuation", "displacements monotone in eta", table.monotone));
    Ok(checks)
}

fn transversal(s: &Scenario, seed: u64, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: TransversalParams = s.params()?;
    let tol = &s.config.tolerances;
    let model = s.build_model()?;
    let x = DVector::from_vec(p.point(Some(model.dim())));
    let (_, sys) = certify_at(&model, &x, &seeded(&p.certify, seed, tol.equilibrium)).map_err(stage("certify"))?;
    let theta = compute_invariant_graph(&sys, Direction::Unstable, &p.graph).map_err(stage("unstable graph"))?;
    let sigma = compute_invariant_graph(&sys, Direction::Stable, &p.graph).map_err(stage("stable graph"))?;
    let ip = IntersectParams { fp_tol: tol.fixed_point, grid_nodes: p.grid_nodes, ..Default::default() };
    let inter = intersect_graphs(&theta, &sigma, &DVector::zeros(sys.dim()), None, &ip).map_err(stage("intersection"))?;
    let spread = uniqueness_spread(&theta, &sigma, &inter.y1, p.n_seeds, seed, &ip).map_err(stage("uniqueness"))?;
    let witness = recenter_at_intersection(&theta, &sigma, &inter, tol.transversal).map_err(stage("recentre"))?;
    let cert = certify_transversal(&witness.chart_theta, &witness.chart_sigma, &witness.point, tol.transversal).map_err(stage("transversality"))?;
    out.write_json("intersection.json", &inter)?;
    out.write_json("transversal.json", &cert)?;
    Ok(vec![
        Check::at_most("transversality", "intersection residual", inter.residual, tol.transversal),
        Check::at_most("transversality", "uniqueness spread", spread, tol.transversal),
        Check { family: "transversality".into(), name: "Lip theta * Lip sigma < 1".into(), value: cert.lip_theta * cert.lip_sigma, limit: 1.0, pass: cert.holds },
    ])
}

#[derive(Serialize)]
struct EdgeRow {
    source: usize,
    target: usize,
    source_label: String,
    target_label: String,
    entry_index: usize,
    contraction: f64,
    transversal: String,
}

fn write_graph(out: &mut Artifacts, stem: &str, g: &ConnectionGraph) -> Result<(), CliError> {
    let rows: Vec<EdgeRow> = g
        .edges
        .iter()
        .map(|e| EdgeRow {
            source: e.source,
            target: e.target,
            source_label: g.nodes[e.source].label.clone(),
            target_label: g.nodes[e.target].label.clone(),
            entry_index: e.witness.entry_index,
            contraction: e.witness.contraction,
            transversal: serde_json::to_value(&e.witness.transversal).ok().and_then(|v| v.get("status").and_then(|s| s.as_str().map(String::from))).unwrap_or_default(),
        })
        .collect();
    out.write_json(&format!("{stem}.json"), g)?;
    out.write_bytes(&format!("{stem}.dot"), g.to_dot().as_bytes())?;
    out.write_csv(&format!("{stem}_edges.csv"), &rows, &["source", "target", "source_label", "target_label", "entry_index", "contraction", "transversal"])
}

fn graph_checks(fam: &str, g: &ConnectionGraph) -> Vec<Check> {
    let mut c = vec![
        Check::flag(fam, "no cycles", g.dg_flag),
        Check::flag(fam, "transitive closure", g.transitive_closure_ok),
        Check { family: fam.into(), name: "probe errors".into(), value: g.pair_errors.len() as f64, limit: 0.0, pass: g.pair_errors.is_empty() },
    ];
    if let Some(d) = &g.dg1 {
        c.push(Check { family: fam.into(), name: "sampled orbits resolved".into(), value: d.terminated as f64, limit: d.samples as f64, pass: d.pass });
    }
    c
}

fn morse_smale(s: &Scenario, seed: u64, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: MorseSmaleParams = s.params()?;
    if p.equilibria.is_empty() {
        return Ok(Vec::new());
    }
    let model = s.build_model()?;
    let cert = seeded(&p.certify, seed, s.config.tolerances.equilibrium);
    let nodes = p
        .equilibria
        .iter()
        .map(|n| Certified::certify(&n.label, &model, &DVector::from_column_slice(&n.x), &cert))
        .collect::<Result<Vec<_>, _>>()
        .map_err(stage("certify"))?;
    let conn = lipdyn::morse_smale::ConnectionParams { seed, ..p.connection };
    let dg1 = p.dg1.map(|d| lipdyn::morse_smale::Dg1Params { seed, ..d });
    let g = build_connection_graph(&model, &nodes, &conn, dg1.as_ref()).map_err(stage("connection graph"))?;
    write_graph(out, "graph", &g)?;
    let mut checks = graph_checks("morse_smale", &g);
    if let Some(expected) = &p.expected_edges {
        let want: std::collections::BTreeSet<(usize, usize)> = expected.iter().copied().collect();
        checks.push(Check::flag("morse_smale", "edge set matches expected", g.edge_set() == want));
    }
    Ok(checks)
}

fn stability(s: &Scenario, seed: u64, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: StabilityParams = s.params()?;
    let fam = p.family.build(s.model()?).map_err(stage("family"))?;
    let eq_tol = s.config.tolerances.equilibrium;
    let cfg = StabilityConfig {
        isolation: seeded(&p.isolation, seed, eq_tol),
        continuation_cert: seeded(&p.continuation_cert, seed, eq_tol),
        continuation: lipdyn::perturbation::ContinuationParams { seed, fp_tol: s.config.tolerances.fixed_point, ..p.continuation },
        connection: lipdyn::morse_smale::ConnectionParams { seed, ..p.connection },
        invertibility: Invertibility::DerivativeSvd,
    };
    let base: Vec<(String, DVector<f64>)> = p.equilibria.iter().map(|n| (n.label.clone(), DVector::from_column_slice(&n.x))).collect();
    let dg1 = p.dg1.map(|d| lipdyn::morse_smale::Dg1Params { seed, ..d });
    let rep = run_stability_experiment(&fam, &base, &cfg, dg1.as_ref()).map_err(stage("stability"))?;
    write_stability(out, &rep)?;
    Ok(stage_checks("stability", &rep))
}

fn write_stability(out: &mut Artifacts, rep: &lipdyn::morse_smale::StabilityReport) -> Result<(), CliError> {
    out.write_json("stability.json", rep)?;
    out.write_csv("stages.csv", &rep.rows, &["eta", "stage", "pass", "detail"])?;
    out.write_bytes("graph_base.dot", rep.base_graph.to_dot().as_bytes())?;
    for (k, (_, g)) in rep.graphs.iter().enumerate() {
        out.write_bytes(&format!("graph_eta{k}.dot"), g.to_dot().as_bytes())?;
    }
    Ok(())
}

fn stage_checks(fam: &str, rep: &lipdyn::morse_smale::StabilityReport) -> Vec<Check> {
    let mut c = graph_checks(&format!("{fam}_base"), &rep.base_graph);
    c.extend(rep.rows.iter().map(|r| Check::flag(fam, &format!("eta={} {}", r.eta, r.stage), r.pass)));
    c
}

fn file_label(label: &str) -> String {
    label.replace('+', "p").replace('-', "m")
}

fn chafee(s: &Scenario, seed: u64, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: ChafeeParams = s.params()?;
    let mut counts = Vec::new();
    for &lambda in &p.count_lambdas {
        match verify_equilibrium_count(&[lambda], p.modes) {
            Ok(rows) => counts.extend(rows),
            Err(CiError::CountMismatch { lambda, expected, found }) => counts.push(CountRow { lambda, modes: p.modes, expected, found, pass: false }),
            Err(e) => return Err(stage("equilibrium count")(e)),
        }
    }
    out.write_csv("counts.csv", &counts, &["lambda", "modes", "expected", "found", "pass"])?;
    let mut checks: Vec<Check> = counts
        .iter()
        .map(|r| Check { family: "chafee_counts".into(), name: format!("lambda={} equilibria", r.lambda), value: r.found as f64, limit: r.expected as f64, pass: r.pass })
        .collect();

    let mut cfg = ChafeeConfig::new(p.modes, p.lambda, p.etas.clone());
    cfg.stability.isolation.delta = p.isolation_delta;
    cfg.stability.continuation_cert.delta = p.continuation_delta;
    cfg.stability.isolation.seed = seed;
    cfg.stability.continuation_cert.seed = seed;
    cfg.stability.continuation.seed = seed;
    cfg.stability.connection.seed = seed;
    cfg.dg1_samples = p.dg1_samples;
    let res = chafee_stability(&cfg).map_err(stage("chafee"))?;
    out.write_json("chafee.json", &res)?;
    for e in &res.equilibria {
        let rows: Vec<Vec<f64>> = profile(&DVector::from_column_slice(&e.state), p.profile_points).into_iter().map(|(x, u)| vec![x, u]).collect();
        out.write_dat(&format!("profile_{}.dat", file_label(&e.label)), &["x", "u"], &rows)?;
    }
    write_stability(out, &res.report)?;
    checks.push(Check { family: "chafee_stability".into(), name: "step perturbation bound".into(), value: res.step_bound, limit: 1.0, pass: res.step_bound < 1.0 });
    checks.extend(stage_checks("chafee_stability", &res.report));
    Ok(checks)
}

#[derive(Serialize)]
struct RatioRow {
    radius: f64,
    ratio: f64,
}

fn nemytskii(s: &Scenario, out: &mut Artifacts) -> Result<Vec<Check>, CliError> {
    let p: NemytskiiParams = s.params()?;
    if p.radii.is_empty() {
        return Ok(Vec::new());
    }
    let tol = &s.config.tolerances;
    let rep = nemytskii_remainder_diagnostic(p.f, p.u0, p.s0, p.p, &p.radii).map_err(stage("remainder"))?;
    out.write_json("remainder.json", &rep)?;
    let rows: Vec<RatioRow> = rep.radii.iter().zip(&rep.ratios).map(|(&radius, &ratio)| RatioRow { radius, ratio }).collect();
    out.write_csv("remainder.csv", &rows, &["radius", "ratio"])?;
    // Small-ball limit: |f(u0 + s0) - f(u0) - f'(u0) s0| / |s0|.
    let exact = (p.f.eval(p.u0 + p.s0) - p.f.eval(p.u0) - p.f.derivative(p.u0) * p.s0).abs() / p.s0.abs();
    let allowed = tol.remainder_abs.max(tol.remainder_rel * exact);
    let last = *rep.ratios.last().unwrap_or(&f64::NAN);
    Ok(vec![
        Check::at_most("nemytskii", "extrapolated limit error", (rep.limit - exact).abs(), allowed),
        Check::at_most("nemytskii", "smallest-radius ratio error", (last - exact).abs(), allowed),
    ])
}
