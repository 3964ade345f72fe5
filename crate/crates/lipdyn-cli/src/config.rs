//! Scenario configs: JSON with `pipeline`, `model`, `split`, `params`,
//! `tolerances` and `seeds`. Pipeline parameters are parsed in a second pass
//! so that their errors keep line and column information.

use std::sync::Arc;

use lipdyn::chafee_infante::ScalarFn;
use lipdyn::graph_transform::{Direction, GraphParams, MapModel, VecMap};
use lipdyn::hyperbolicity::{CertifyParams, HypError};
use lipdyn::models;
use lipdyn::morse_smale::{ConnectionParams, Dg1Params};
use lipdyn::perturbation::{ContinuationParams, PerturbationFamily};
use nalgebra::{DMatrix, DVector};
use serde::de::{DeserializeOwned, IgnoredAny};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Split,
    Manifold,
    Certify,
    Continue,
    Transversal,
    MorseSmale,
    Stability,
    Chafee,
    Nemytskii,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Split => "split",
            Pipeline::Manifold => "manifold",
            Pipeline::Certify => "certify",
            Pipeline::Continue => "continue",
            Pipeline::Transversal => "transversal",
            Pipeline::MorseSmale => "morse-smale",
            Pipeline::Stability => "stability",
            Pipeline::Chafee => "chafee",
            Pipeline::Nemytskii => "nemytskii",
        }
    }

    fn needs_model(self) -> bool {
        !matches!(self, Pipeline::Chafee | Pipeline::Nemytskii)
    }
}

/// Reference maps from [`lipdyn::models`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear { matrix: Vec<Vec<f64>> },
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    QuadraticSaddle { a: f64, b: f64, c: f64 },
    SineSaddle { a: f64, b: f64, gamma: f64 },
    Cubic { kappa: f64, #[serde(default)] eta: f64 },
    BistablePl { #[serde(default)] eta: f64 },
    PlanarGradient { kappa: f64, mu: f64, c: f64 },
    Replicator,
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(format!("matrix must be square and non-empty, got {n} rows"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Linear { matrix } | ModelSpec::Affine { matrix, .. } => matrix.len(),
            ModelSpec::Cubic { .. } | ModelSpec::BistablePl { .. } => 1,
            _ => 2,
        }
    }

    /// The map, with `eta` replacing the model's own `η` where it has one.
    pub fn build(&self, eta: Option<f64>) -> Result<MapModel, String> {
        Ok(match self {
            ModelSpec::Linear { matrix: m } => models::linear(matrix(m)?),
            ModelSpec::Affine { matrix: m, offset } => {
                let m = matrix(m)?;
                if offset.len() != m.nrows() {
                    return Err(format!("offset has length {}, expected {}", offset.len(), m.nrows()));
                }
                models::affine(m, DVector::from_column_slice(offset))
            }
            ModelSpec::QuadraticSaddle { a, b, c } => models::quadratic_saddle(*a, *b, *c),
            ModelSpec::SineSaddle { a, b, gamma } => models::sine_saddle(*a, *b, *gamma),
            ModelSpec::Cubic { kappa, eta: e } => models::cubic_1d(*kappa, eta.unwrap_or(*e)),
            ModelSpec::BistablePl { eta: e } => models::bistable_pl(eta.unwrap_or(*e)),
            ModelSpec::PlanarGradient { kappa, mu, c } => models::planar_gradient(*kappa, *mu, *c),
            ModelSpec::Replicator => models::replicator_cycle(),
        })
    }

    fn has_eta(&self) -> bool {
        matches!(self, ModelSpec::Cubic { .. } | ModelSpec::BistablePl { .. })
    }
}

/// How `T_η` is formed from the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// Sets the model's own `η` (cubic, bistable_pl).
    ModelEta,
    /// Adds `η (sin(x/2 + y/2 + 1), cos(x/2 - y/2))`; planar models only.
    SineBump,
    /// Adds `η c`.
    Constant { c: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    /// Parameter values; the first must be 0.
    pub etas: Vec<f64>,
    pub perturbation: Perturbation,
}

impl FamilySpec {
    pub fn build(&self, model: &ModelSpec) -> Result<PerturbationFamily, String> {
        if self.etas.first() != Some(&0.0) {
            return Err("etas must start at 0".into());
        }
        let base = model.build(None)?;
        let fam = match &self.perturbation {
            Perturbation::ModelEta => {
                if !model.has_eta() {
                    return Err("model_eta needs a model with an eta parameter".into());
                }
                let maps = self.etas.iter().map(|&e| model.build(Some(e))).collect::<Result<Vec<_>, _>>()?;
                PerturbationFamily::new(self.etas.clone(), maps)
            }
            Perturbation::SineBump => {
                if model.dim() != 2 {
                    return Err("sine_bump needs a planar model".into());
                }
                let bump: VecMap = Arc::new(models::sine_bump);
                PerturbationFamily::additive(&base, bump, self.etas.clone())
            }
            Perturbation::Constant { c } => {
                if c.len() != model.dim() {
                    return Err(format!("constant has length {}, expected {}", c.len(), model.dim()));
                }
                let c = DVector::from_column_slice(c);
                let shift: VecMap = Arc::new(move |_: &DVector<f64>| c.clone());
                PerturbationFamily::additive(&base, shift, self.etas.clone())
            }
        };
        fam.map_err(|e| e.to_string())
    }
}

/// Splitting radius and optional adapted-norm rates `a` (unstable) and `b` (stable).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub rho: f64,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub gap_tol: f64,
    pub margin_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { rho: 1.0, a: None, b: None, gap_tol: 1e-8, margin_fraction: 0.01 }
    }
}

/// Numeric tolerances for the pass/fail checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Projection identities of a splitting.
    pub projection: f64,
    /// Distance from `S(graph)` to the graph.
    pub invariance: f64,
    /// Graph change under `rho(1 ± shift)`.
    pub rho_star: f64,
    pub rate_slack: f64,
    /// `|T(x*) - x*|` accepted as an equilibrium.
    pub equilibrium: f64,
    pub fixed_point: f64,
    pub transversal: f64,
    pub remainder_rel: f64,
    pub remainder_abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            projection: 1e-10,
            invariance: 1e-8,
            rho_star: 1e-8,
            rate_slack: 0.01,
            equilibrium: 1e-9,
            fixed_point: 1e-12,
            transversal: 1e-10,
            remainder_rel: 0.02,
            remainder_abs: 1e-12,
        }
    }
}

/// Every random choice in a run derives from `main`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub main: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub pipeline: Pipeline,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub seeds: Seeds,
}

/// Second-pass view of a config that only types `params`.
#[derive(Deserialize)]
struct ParamsOnly<P> {
    #[serde(rename = "params", default)]
    params: Option<P>,
    #[serde(rename = "pipeline")]
    _pipeline: IgnoredAny,
    #[serde(rename = "model", default)]
    _model: Option<IgnoredAny>,
    #[serde(rename = "split", default)]
    _split: Option<IgnoredAny>,
    #[serde(rename = "tolerances", default)]
    _tolerances: Option<IgnoredAny>,
    #[serde(rename = "seeds")]
    _seeds: IgnoredAny,
}

fn parse_with_path<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        CliError::ConfigInvalid { field, line: inner.line(), column: inner.column(), message: inner.to_string() }
    })
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::ConfigInvalid { field: field.to_string(), line: 0, column: 0, message: message.into() }
}

/// A parsed config together with its source text.
pub struct Scenario {
    pub config: Config,
    pub text: String,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Config = parse_with_path(text)?;
        let s = Scenario { config, text: text.to_string() };
        s.validate()?;
        Ok(s)
    }

    /// Typed `params`; absent params take the defaults.
    pub fn params<P: DeserializeOwned + Default>(&self) -> Result<P, CliError> {
        let p: ParamsOnly<P> = parse_with_path(&self.text)?;
        Ok(p.params.unwrap_or_default())
    }

    pub fn model(&self) -> Result<&ModelSpec, CliError> {
        self.config.model.as_ref().ok_or_else(|| invalid("model", format!("pipeline {} needs a model", self.config.pipeline.name())))
    }

    pub fn build_model(&self) -> Result<MapModel, CliError> {
        self.model()?.build(None).map_err(|m| invalid("model", m))
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        if c.pipeline.needs_model() {
            self.build_model()?;
        }
        let sp = &c.split;
        if !(sp.rho.is_finite() && sp.rho > 0.0) {
            return Err(invalid("split.rho", format!("rho must be positive, got {}", sp.rho)));
        }
        let (a, b) = (sp.a.unwrap_or(f64::INFINITY), sp.b.unwrap_or(0.0));
        if !(b < 1.0 && a > 1.0) {
            let field = if b >= 1.0 { "split.b" } else { "split.a" };
            return Err(invalid(field, format!("GapViolated: {}", HypError::GapViolated { a, b })));
        }
        self.validate_params()
    }

    fn validate_params(&self) -> Result<(), CliError> {
        let dim = self.config.model.as_ref().map(ModelSpec::dim);
        let check_point = |field: &str, x: &[f64]| match dim {
            Some(d) if x.len() != d => Err(invalid(field, format!("point has length {}, model dimension is {d}", x.len()))),
            _ => Ok(()),
        };
        match self.config.pipeline {
            Pipeline::Split => check_point("params.x_star", &self.params::<SplitParams>()?.point(dim)),
            Pipeline::Manifold => check_point("params.x_star", &self.params::<ManifoldParams>()?.point(dim)),
            Pipeline::Certify => check_point("params.x_star", &self.params::<CertifyRunParams>()?.point(dim)),
            Pipeline::Transversal => check_point("params.x_star", &self.params::<TransversalParams>()?.point(dim)),
            Pipeline::Continue => {
                let p: ContinueParams = self.params()?;
                p.equilibria.iter().try_for_each(|x| check_point("params.equilibria", x))?;
                p.family.build(self.model()?).map(|_| ()).map_err(|m| invalid("params.family", m))
            }
            Pipeline::MorseSmale => {
                let p: MorseSmaleParams = self.params()?;
                p.equilibria.iter().try_for_each(|n| check_point("params.equilibria", &n.x))
            }
            Pipeline::Stability => {
                let p: StabilityParams = self.params()?;
                p.equilibria.iter().try_for_each(|n| check_point("params.equilibria", &n.x))?;
                p.family.build(self.model()?).map(|_| ()).map_err(|m| invalid("params.family", m))
            }
            Pipeline::Chafee => {
                let p: ChafeeParams = self.params()?;
                if p.modes == 0 || p.lambda <= 0.0 {
                    return Err(invalid("params", "modes and lambda must be positive"));
                }
                if p.etas.first() != Some(&0.0) {
                    return Err(invalid("params.etas", "etas must start at 0"));
                }
                Ok(())
            }
            Pipeline::Nemytskii => {
                let p: NemytskiiParams = self.params()?;
                if p.radii.iter().any(|&r| !(r > 0.0 && r <= std::f64::consts::FRAC_PI_2)) {
                    return Err(invalid("params.radii", "radii must lie in (0, pi/2]"));
                }
                Ok(())
            }
        }
    }
}

fn point_or_origin(x: &Option<Vec<f64>>, dim: Option<usize>) -> Vec<f64> {
    x.clone().unwrap_or_else(|| vec![0.0; dim.unwrap_or(0)])
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    /// Linearisation point; the origin when absent.
    pub x_star: Option<Vec<f64>>,
}

impl SplitParams {
    pub fn point(&self, dim: Option<usize>) -> Vec<f64> {
        point_or_origin(&self.x_star, dim)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldParams {
    pub x_star: Option<Vec<f64>>,
    pub certify: CertifyParams,
    pub graph: GraphParams,
    pub directions: Vec<Direction>,
    pub n_probe: usize,
    pub orbit_steps: usize,
    pub rho_shift: Option<f64>,
}

impl Default for ManifoldParams {
    fn default() -> Self {
        ManifoldParams {
            x_star: None,
            certify: CertifyParams { lip_method: lipdyn::hyperbolicity::LipMethod::Pairs(20_000), ..Default::default() },
            graph: GraphParams::default(),
            directions: vec![Direction::Unstable, Direction::Stable],
            n_probe: 10,
            orbit_steps: 20,
            rho_shift: Some(0.02),
        }
    }
}

impl ManifoldParams {
    pub fn point(&self, dim: Option<usize>) -> Vec<f64> {
        point_or_origin(&self.x_star, dim)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyRunParams {
    pub x_star: Option<Vec<f64>>,
    pub certify: CertifyParams,
    /// Also fail unless `γ < γ₁`.
    pub require_strong: bool,
}

impl Default for CertifyRunParams {
    fn default() -> Self {
        CertifyRunParams {
            x_star: None,
            certify: CertifyParams { lip_method: lipdyn::hyperbolicity::LipMethod::Pairs(20_000), ..Default::default() },
            require_strong: false,
        }
    }
}

impl CertifyRunParams {
    pub fn point(&self, dim: Option<usize>) -> Vec<f64> {
        point_or_origin(&self.x_star, dim)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinueParams {
    pub equilibria: Vec<Vec<f64>>,
    pub certify: CertifyParams,
    pub family: FamilySpec,
    pub continuation: ContinuationParams,
}

impl Default for ContinueParams {
    fn default() -> Self {
        ContinueParams {
            equilibria: Vec::new(),
            certify: CertifyParams { lip_method: lipdyn::hyperbolicity::LipMethod::Pairs(20_000), ..Default::default() },
            family: FamilySpec { etas: vec![0.0], perturbation: Perturbation::Constant { c: Vec::new() } },
            continuation: ContinuationParams { n_pairs: 20_000, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransversalParams {
    pub x_star: Option<Vec<f64>>,
    pub certify: CertifyParams,
    pub graph: GraphParams,
    pub n_seeds: usize,
    pub grid_nodes: usize,
}

impl Default for TransversalParams {
    fn default() -> Self {
        TransversalParams {
            x_star: None,
            certify: CertifyParams { lip_method: lipdyn::hyperbolicity::LipMethod::Pairs(20_000), ..Default::default() },
            graph: GraphParams::default(),
            n_seeds: 10,
            grid_nodes: 2001,
        }
    }
}

impl TransversalParams {
    pub fn point(&self, dim: Option<usize>) -> Vec<f64> {
        point_or_origin(&self.x_star, dim)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub label: String,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorseSmaleParams {
    pub equilibria: Vec<NodeSpec>,
    pub certify: CertifyParams,
    pub connection: ConnectionParams,
    pub dg1: Option<Dg1Params>,
    /// When given, the edge set must equal this list of `[source, target]` pairs.
    pub expected_edges: Option<Vec<(usize, usize)>>,
}

impl Default for MorseSmaleParams {
    fn default() -> Self {
        MorseSmaleParams {
            equilibria: Vec::new(),
            certify: CertifyParams { lip_method: lipdyn::hyperbolicity::LipMethod::Pairs(20_000), ..Default::default() },
            connection: ConnectionParams::default(),
            dg1: None,
            expected_edges: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityParams {
    pub equilibria: Vec<NodeSpec>,
    pub family: FamilySpec,
    pub isolation: CertifyParams,
    pub continuation_cert: CertifyParams,
    pub continuation: ContinuationParams,
    pub connection: ConnectionParams,
    pub dg1: Option<Dg1Params>,
}

impl Default for StabilityParams {
    fn default() -> Self {
        let cert = CertifyParams { lip_method: lipdyn::hyperbolicity::LipMethod::Pairs(20_000), ..Default::default() };
        StabilityParams {
            equilibria: Vec::new(),
            family: FamilySpec { etas: vec![0.0], perturbation: Perturbation::ModelEta },
            isolation: cert,
            continuation_cert: cert,
            continuation: ContinuationParams { n_pairs: 20_000, ..Default::default() },
            connection: ConnectionParams::default(),
            dg1: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChafeeParams {
    pub modes: usize,
    pub lambda: f64,
    pub etas: Vec<f64>,
    /// `λ` values whose equilibrium counts are checked against `2n + 1`.
    pub count_lambdas: Vec<f64>,
    pub isolation_delta: f64,
    pub continuation_delta: f64,
    pub dg1_samples: usize,
    pub profile_points: usize,
}

impl Default for ChafeeParams {
    fn default() -> Self {
        ChafeeParams {
            modes: 16,
            lambda: 2.0,
            etas: vec![0.0, 0.05],
            count_lambdas: vec![0.5, 2.0, 5.0, 10.0],
            isolation_delta: 0.03,
            continuation_delta: 0.1,
            dg1_samples: 20,
            profile_points: 128,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NemytskiiParams {
    pub f: ScalarFn,
    pub u0: f64,
    pub s0: f64,
    pub p: f64,
    pub radii: Vec<f64>,
}

impl Default for NemytskiiParams {
    fn default() -> Self {
        NemytskiiParams { f: ScalarFn::Sine, u0: 0.0, s0: std::f64::consts::FRAC_PI_2, p: 2.0, radii: (1..=10).map(|i| 2f64.powi(-i)).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_of(text: &str) -> CliError {
        Scenario::parse(text).err().expect("config should be rejected")
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let s = Scenario::parse(r#"{ "pipeline": "chafee", "seeds": { "main": 5 } }"#).unwrap();
        let p: ChafeeParams = s.params().unwrap();
        assert_eq!((p.modes, p.lambda, p.etas), (16, 2.0, vec![0.0, 0.05]));
        assert_eq!(s.config.tolerances.invariance, 1e-8);
    }

    #[test]
    fn missing_model_is_rejected() {
        match err_of(r#"{ "pipeline": "split", "seeds": { "main": 0 } }"#) {
            CliError::ConfigInvalid { field, .. } => assert_eq!(field, "model"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn non_square_matrix_is_rejected() {
        let e = err_of(r#"{ "pipeline": "split", "model": { "kind": "linear", "matrix": [[1.0, 2.0]] }, "seeds": { "main": 0 } }"#);
        assert!(e.to_string().contains("square"), "{e}");
    }

    #[test]
    fn stable_rate_at_one_violates_gap() {
        let e = err_of(r#"{ "pipeline": "nemytskii", "split": { "b": 1.0 }, "seeds": { "main": 0 } }"#);
        assert!(matches!(&e, CliError::ConfigInvalid { field, message, .. } if field == "split.b" && message.starts_with("GapViolated")), "{e}");
    }

    #[test]
    fn wrong_point_length_is_rejected() {
        let e = err_of(r#"{ "pipeline": "certify", "model": { "kind": "replicator" }, "params": { "x_star": [0.0] }, "seeds": { "main": 0 } }"#);
        assert!(e.to_string().contains("params.x_star"), "{e}");
    }

    #[test]
    fn param_errors_carry_position() {
        let text = "{\"pipeline\": \"nemytskii\",\n\"params\": {\"p\": \"two\"},\n\"seeds\": {\"main\": 0}}";
        match err_of(text) {
            CliError::ConfigInvalid { field, line, .. } => assert_eq!((field.as_str(), line), ("params.p", 2)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn family_needs_zero_first_and_matching_model() {
        let spec = ModelSpec::SineSaddle { a: 2.0, b: 0.5, gamma: 0.01 };
        assert!(FamilySpec { etas: vec![0.1], perturbation: Perturbation::SineBump }.build(&spec).is_err());
        assert!(FamilySpec { etas: vec![0.0, 0.1], perturbation: Perturbation::ModelEta }.build(&spec).is_err());
        let fam = FamilySpec { etas: vec![0.0, 0.1], perturbation: Perturbation::Constant { c: vec![1.0, 0.0] } }.build(&spec).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let d = fam.models[1].eval(&x) - fam.models[0].eval(&x);
        assert!((d[0] - 0.1).abs() < 1e-15 && d[1].abs() < 1e-15);
    }
}
