//! Small reference maps with known structure, shared by tests and the CLI.

use nalgebra::{DMatrix, DVector};

use crate::graph_transform::{DomainBox, MapModel};

/// `x ↦ M x`.
pub fn linear(m: DMatrix<f64>) -> MapModel {
    let d = m.nrows();
    let (m1, m2) = (m.clone(), m);
    MapModel::new(move |x: &DVector<f64>| &m1 * x, DomainBox::cube(d, 10.0)).with_jacobian(move |_| m2.clone())
}

/// `x ↦ M x + c`.
pub fn affine(m: DMatrix<f64>, c: DVector<f64>) -> MapModel {
    let d = m.nrows();
    let (m1, m2) = (m.clone(), m);
    MapModel::new(move |x: &DVector<f64>| &m1 * x + &c, DomainBox::cube(d, 10.0)).with_jacobian(move |_| m2.clone())
}

/// Planar saddle `(x, y) ↦ (a x + c y², b y + c x²)`.
pub fn quadratic_saddle(a: f64, b: f64, c: f64) -> MapModel {
    MapModel::new(
        move |v: &DVector<f64>| DVector::from_vec(vec![a * v[0] + c * v[1] * v[1], b * v[1] + c * v[0] * v[0]]),
        DomainBox::cube(2, 10.0),
    )
    .with_jacobian(move |v| DMatrix::from_row_slice(2, 2, &[a, 2.0 * c * v[1], 2.0 * c * v[0], b]))
}

/// Planar saddle `(x, y) ↦ (a x + γ sin y, b y + γ sin x)`; `N` has Lipschitz constant `γ`.
pub fn sine_saddle(a: f64, b: f64, gamma: f64) -> MapModel {
    MapModel::new(
        move |v: &DVector<f64>| DVector::from_vec(vec![a * v[0] + gamma * v[1].sin(), b * v[1] + gamma * v[0].sin()]),
        DomainBox::cube(2, 4.0),
    )
    .with_lip(gamma)
    .with_jacobian(move |v| DMatrix::from_row_slice(2, 2, &[a, gamma * v[1].cos(), gamma * v[0].cos(), b]))
}

/// Planar perturbation `(sin(x/2 + y/2 + 1), cos(x/2 - y/2))`.
pub fn sine_bump(v: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![(0.5 * v[0] + 0.5 * v[1] + 1.0).sin(), (0.5 * v[0] - 0.5 * v[1]).cos()])
}

/// `x ↦ x + κ(x - x³) + η sin x`: fixed points `0, ±1` at `η = 0`, with
/// `0` repelling and `±1` attracting for `0 < κ < 1`.
pub fn cubic_1d(kappa: f64, eta: f64) -> MapModel {
    MapModel::new(
        move |v: &DVector<f64>| {
            let x = v[0];
            DVector::from_element(1, x + kappa * (x - x * x * x) + eta * x.sin())
        },
        DomainBox::cube(1, 3.0),
    )
    .with_jacobian(move |v| {
        let x = v[0];
        DMatrix::from_element(1, 1, 1.0 + kappa * (1.0 - 3.0 * x * x) + eta * x.cos())
    })
}

/// Odd piecewise-linear bistable map plus `η sin x`: slope 2 on `|x| <= 0.4`,
/// 0.5 up to `0.6` and 0.25 beyond, so `0` repels, `±1` attract and the map is
/// linear on balls of radius 0.4 around all three.
pub fn bistable_pl(eta: f64) -> MapModel {
    fn branch(x: f64) -> (f64, f64) {
        let (ax, sg) = (x.abs(), x.signum());
        if ax <= 0.4 {
            (2.0 * x, 2.0)
        } else if ax <= 0.6 {
            (sg * (0.8 + 0.5 * (ax - 0.4)), 0.5)
        } else {
            (sg * (0.9 + 0.25 * (ax - 0.6)), 0.25)
        }
    }
    MapModel::new(
        move |v: &DVector<f64>| DVector::from_element(1, branch(v[0]).0 + eta * v[0].sin()),
        DomainBox::cube(1, 3.0),
    )
    .with_jacobian(move |v| DMatrix::from_element(1, 1, branch(v[0]).1 + eta * v[0].cos()))
}

/// Planar gradient-like map `(x, y) ↦ (x + κ(x - x³), μ y + c x²)` whose
/// unstable set of the origin is a curve ending at the two sinks.
pub fn planar_gradient(kappa: f64, mu: f64, c: f64) -> MapModel {
    MapModel::new(
        move |v: &DVector<f64>| {
            let x = v[0];
            DVector::from_vec(vec![x + kappa * (x - x * x * x), mu * v[1] + c * x * x])
        },
        DomainBox::cube(2, 3.0),
    )
    .with_jacobian(move |v| {
        let x = v[0];
        DMatrix::from_row_slice(2, 2, &[1.0 + kappa * (1.0 - 3.0 * x * x), 0.0, 2.0 * c * x, mu])
    })
}

/// Sinks of [`planar_gradient`]: `(±1, c/(1-μ))`.
pub fn planar_gradient_sinks(mu: f64, c: f64) -> [DVector<f64>; 2] {
    let y = c / (1.0 - mu);
    [DVector::from_vec(vec![1.0, y]), DVector::from_vec(vec![-1.0, y])]
}

fn rps_field(x: &DVector<f64>) -> DVector<f64> {
    // x₃ = 1 - x₁ - x₂; payoff rock-paper-scissors, antisymmetric so xᵀAx = 0.
    let (x1, x2) = (x[0], x[1]);
    DVector::from_vec(vec![x1 * (1.0 - x1 - 2.0 * x2), x2 * (2.0 * x1 + x2 - 1.0)])
}

fn rps_field_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
    let (x1, x2) = (x[0], x[1]);
    DMatrix::from_row_slice(2, 2, &[1.0 - 2.0 * x1 - 2.0 * x2, -2.0 * x1, 2.0 * x2, 2.0 * x1 + 2.0 * x2 - 1.0])
}

const RPS_STEPS: usize = 100;

/// RK4 on the state and its variational equation.
fn rps_flow(x: &DVector<f64>, with_jac: bool) -> (DVector<f64>, DMatrix<f64>) {
    let h = 1.0 / RPS_STEPS as f64;
    let mut x = x.clone();
    let mut j = DMatrix::identity(2, 2);
    for _ in 0..RPS_STEPS {
        let k1 = rps_field(&x);
        let x2 = &x + &k1 * (h / 2.0);
        let k2 = rps_field(&x2);
        let x3 = &x + &k2 * (h / 2.0);
        let k3 = rps_field(&x3);
        let x4 = &x + &k3 * h;
        let k4 = rps_field(&x4);
        if with_jac {
            let j1 = rps_field_jacobian(&x) * &j;
            let j2 = rps_field_jacobian(&x2) * (&j + &j1 * (h / 2.0));
            let j3 = rps_field_jacobian(&x3) * (&j + &j2 * (h / 2.0));
            let j4 = rps_field_jacobian(&x4) * (&j + &j3 * h);
            j += (j1 + j2 * 2.0 + j3 * 2.0 + j4) * (h / 6.0);
        }
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    (x, j)
}

/// Time-one map of rock-paper-scissors replicator dynamics on the simplex,
/// in coordinates `(x₁, x₂)`. The vertices `e₁ = (1,0)`, `e₂ = (0,1)`,
/// `e₃ = (0,0)` are saddles joined by the heteroclinic cycle
/// `e₁ → e₂ → e₃ → e₁` along the edges.
pub fn replicator_cycle() -> MapModel {
    MapModel::new(|x: &DVector<f64>| rps_flow(x, false).0, DomainBox::cube(2, 2.0)).with_jacobian(|x| rps_flow(x, true).1)
}

pub fn replicator_vertices() -> [DVector<f64>; 3] {
    [DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![0.0, 0.0])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_transform::finite_difference_jacobian;

    #[test]
    fn analytic_jacobians_match_differences() {
        let p = DVector::from_vec(vec![0.3, -0.2]);
        for m in [quadratic_saddle(2.0, 0.5, 0.3), sine_saddle(2.0, 0.5, 0.05), planar_gradient(0.5, 0.4, 0.3), replicator_cycle()] {
            let fd = finite_difference_jacobian(&*m.evaluator, &p, 1e-6);
            assert!((m.jacobian_at(&p) - fd).amax() < 1e-7);
        }
        let x = DVector::from_element(1, 0.7);
        for c in [cubic_1d(0.5, 0.1), bistable_pl(0.1)] {
            assert!((c.jacobian_at(&x) - finite_difference_jacobian(&*c.evaluator, &x, 1e-6)).amax() < 1e-8);
        }
    }

    #[test]
    fn fixed_points_are_fixed() {
        let r = replicator_cycle();
        for v in replicator_vertices() {
            assert!((r.eval(&v) - &v).amax() < 1e-15);
        }
        let b = bistable_pl(0.0);
        for x in [-1.0, 0.0, 1.0] {
            assert_eq!(b.eval(&DVector::from_element(1, x))[0], x);
        }
        let g = planar_gradient(0.5, 0.4, 0.3);
        for s in planar_gradient_sinks(0.4, 0.3) {
            assert!((g.eval(&s) - &s).amax() < 1e-15);
        }
    }

    #[test]
    fn replicator_edge_is_invariant() {
        let r = replicator_cycle();
        let x = r.eval(&DVector::from_vec(vec![0.7, 0.3]));
        assert!((x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!(x[1] > 0.3);
    }
}
