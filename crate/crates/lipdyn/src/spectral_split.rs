//! Spectral splitting of a linear map across a circle of radius `rho`,
//! together with the iterate-based adapted norms that turn the spectral
//! bounds into exact operator bounds.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Eigenvalues closer than this to the splitting circle are rejected.
pub const GAP_TOL: f64 = 1e-8;
/// Fraction of the distance between the spectrum and `rho` used as margin for `a` and `b`.
pub const MARGIN_FRACTION: f64 = 0.01;
/// Largest iterate depth accepted when building an adapted norm.
pub const MAX_DEPTH: usize = 10_000;

const SIGN_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("eigenvalue of modulus {modulus} lies within {tol:e} of rho = {rho}")]
    EigenvalueOnCircle { modulus: f64, rho: f64, tol: f64 },
    #[error("eigendecomposition did not converge")]
    NonConvergedEigensolve,
    #[error("rate {rate} is outside the admissible interval ({lo}, {hi}) for the {part} part")]
    RateOutsideSpectralGap {
        part: &'static str,
        rate: f64,
        lo: f64,
        hi: f64,
    },
    #[error("adapted norm depth exceeds {0}")]
    DepthOverflow(usize),
    #[error("splitting is not hyperbolic at the unit circle: a = {a}, b = {b}")]
    NotHyperbolicAtUnitCircle { a: f64, b: f64 },
    #[error("input contains non-finite entries")]
    NonFinite,
    #[error("matrix must be square and non-empty, got {0}x{1}")]
    BadShape(usize, usize),
}

/// A linear map together with its splitting `X = X_u ⊕ X_s` across `|z| = rho`.
///
/// Bases are orthonormal, so Euclidean norms of subspace coordinates equal the
/// Euclidean norms of the embedded vectors. When a part is empty the
/// corresponding bound is pushed to its limit: `a = inf` without unstable
/// spectrum, and `b = MARGIN_FRACTION * rho` without stable spectrum.
#[derive(Debug, Clone)]
pub struct SplitLinearMap {
    pub matrix: DMatrix<f64>,
    pub rho: f64,
    pub basis_u: DMatrix<f64>,
    pub basis_s: DMatrix<f64>,
    pub proj_u: DMatrix<f64>,
    pub proj_s: DMatrix<f64>,
    /// Rows mapping an ambient vector to its `X_u` coordinates.
    pub coord_u: DMatrix<f64>,
    /// Rows mapping an ambient vector to its `X_s` coordinates.
    pub coord_s: DMatrix<f64>,
    /// Restriction of the map to `X_u` in basis coordinates.
    pub l_u: DMatrix<f64>,
    pub l_u_inv: DMatrix<f64>,
    /// Restriction of the map to `X_s` in basis coordinates.
    pub l_s: DMatrix<f64>,
    pub a: f64,
    pub b: f64,
    /// Smallest unstable eigenvalue modulus (`inf` if none).
    pub min_unstable_modulus: f64,
    /// Largest stable eigenvalue modulus (0 if none).
    pub max_stable_modulus: f64,
    pub margin_fraction: f64,
}

/// Residuals of the projection identities.
#[derive(Debug, Clone, Copy)]
pub struct SplitResiduals {
    pub sum_to_identity: f64,
    pub idempotent_u: f64,
    pub idempotent_s: f64,
    pub commute_u: f64,
    pub commute_s: f64,
}

impl SplitResiduals {
    pub fn max(&self) -> f64 {
        [
            self.sum_to_identity,
            self.idempotent_u,
            self.idempotent_s,
            self.commute_u,
            self.commute_s,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, s| acc.max(*s))
}

/// Moduli of the eigenvalues, via the real Schur form.
pub fn eigenvalue_moduli(m: &DMatrix<f64>) -> Result<Vec<f64>, SplitError> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), 1e-15, 10_000)
        .ok_or(SplitError::NonConvergedEigensolve)?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).collect())
}

pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, SplitError> {
    Ok(eigenvalue_moduli(m)?.into_iter().fold(0.0, f64::max))
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(c: &DMatrix<f64>) -> Result<DMatrix<f64>, SplitError> {
    let n = c.nrows();
    let mut s = c.clone();
    for _ in 0..SIGN_MAX_ITER {
        let inv = s
            .clone()
            .try_inverse()
            .ok_or(SplitError::NonConvergedEigensolve)?;
        let det = s.determinant().abs();
        let mu = if det.is_finite() && det > 0.0 {
            det.powf(-1.0 / n as f64)
        } else {
            1.0
        };
        let next = (&s * mu + &inv / mu) * 0.5;
        let change = (&next - &s).norm();
        let scale = next.norm().max(1.0);
        s = next;
        if change <= 1e-13 * scale {
            // A final unscaled step settles the last digits.
            let inv = s
                .clone()
                .try_inverse()
                .ok_or(SplitError::NonConvergedEigensolve)?;
            return Ok((&s + inv) * 0.5);
        }
    }
    Err(SplitError::NonConvergedEigensolve)
}

/// Orthonormal basis for the range of a projector of known rank.
fn range_basis(p: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let d = p.nrows();
    if rank == 0 {
        return DMatrix::zeros(d, 0);
    }
    let svd = p.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let cols: Vec<DVector<f64>> = order[..rank].iter().map(|&i| u.column(i).into_owned()).collect();
    DMatrix::from_columns(&cols)
}

/// Splits `matrix` across the circle of radius `rho` with the default gap tolerance.
pub fn split_spectrum(matrix: &DMatrix<f64>, rho: f64) -> Result<SplitLinearMap, SplitError> {
    split_spectrum_with(matrix, rho, GAP_TOL, MARGIN_FRACTION)
}

pub fn split_spectrum_with(
    matrix: &DMatrix<f64>,
    rho: f64,
    gap_tol: f64,
    margin_fraction: f64,
) -> Result<SplitLinearMap, SplitError> {
    let d = matrix.nrows();
    if d == 0 || matrix.ncols() != d {
        return Err(SplitError::BadShape(matrix.nrows(), matrix.ncols()));
    }
    if !rho.is_finite() || rho <= 0.0 || matrix.iter().any(|v| !v.is_finite()) {
        return Err(SplitError::NonFinite);
    }
    let moduli = eigenvalue_moduli(matrix)?;
    if let Some(&m) = moduli.iter().find(|m| (**m - rho).abs() <= gap_tol) {
        return Err(SplitError::EigenvalueOnCircle {
            modulus: m,
            rho,
            tol: gap_tol,
        });
    }
    let d_u = moduli.iter().filter(|m| **m > rho).count();
    let min_unstable = moduli
        .iter()
        .copied()
        .filter(|m| *m > rho)
        .fold(f64::INFINITY, f64::min);
    let max_stable = moduli
        .iter()
        .copied()
        .filter(|m| *m < rho)
        .fold(0.0, f64::max);

    let identity = DMatrix::<f64>::identity(d, d);
    let p_u = if d_u == 0 {
        DMatrix::zeros(d, d)
    } else if d_u == d {
        identity.clone()
    } else {
        // Cayley transform sends |z| > rho to the right half plane.
        let m = matrix / rho;
        let denom = (&m - &identity)
            .try_inverse()
            .ok_or(SplitError::NonConvergedEigensolve)?;
        let c = (&m + &identity) * denom;
        (&identity + matrix_sign(&c)?) * 0.5
    };
    let basis_u = range_basis(&p_u, d_u);
    let basis_s = range_basis(&(&identity - &p_u), d - d_u);

    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(d);
    cols.extend(basis_u.column_iter().map(|c| c.into_owned()));
    cols.extend(basis_s.column_iter().map(|c| c.into_owned()));
    let v = DMatrix::from_columns(&cols);
    let w = v
        .clone()
        .try_inverse()
        .ok_or(SplitError::NonConvergedEigensolve)?;
    let coord_u = w.rows(0, d_u).into_owned();
    let coord_s = w.rows(d_u, d - d_u).into_owned();
    let proj_u = &basis_u * &coord_u;
    let proj_s = &basis_s * &coord_s;
    let l_u = &coord_u * matrix * &basis_u;
    let l_s = &coord_s * matrix * &basis_s;
    let l_u_inv = if d_u == 0 {
        DMatrix::zeros(0, 0)
    } else {
        l_u.clone()
            .try_inverse()
            .ok_or(SplitError::NonConvergedEigensolve)?
    };
    if [&proj_u, &proj_s, &l_u, &l_s, &l_u_inv]
        .iter()
        .any(|m| m.iter().any(|x| !x.is_finite()))
    {
        return Err(SplitError::NonConvergedEigensolve);
    }

    let a = if d_u == 0 {
        f64::INFINITY
    } else {
        min_unstable - margin_fraction * (min_unstable - rho)
    };
    let b = max_stable + margin_fraction * (rho - max_stable);

    Ok(SplitLinearMap {
        matrix: matrix.clone(),
        rho,
        basis_u,
        basis_s,
        proj_u,
        proj_s,
        coord_u,
        coord_s,
        l_u,
        l_u_inv,
        l_s,
        a,
        b,
        min_unstable_modulus: min_unstable,
        max_stable_modulus: max_stable,
        margin_fraction,
    })
}

impl SplitLinearMap {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim_u(&self) -> usize {
        self.basis_u.ncols()
    }

    pub fn dim_s(&self) -> usize {
        self.basis_s.ncols()
    }

    /// Ambient vector to split coordinates `(xi, eta)` stacked in one vector.
    pub fn to_coords(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, self.dim_u()).copy_from(&(&self.coord_u * x));
        z.rows_mut(self.dim_u(), self.dim_s())
            .copy_from(&(&self.coord_s * x));
        z
    }

    /// Split coordinates back to the ambient space.
    pub fn from_coords(&self, z: &DVector<f64>) -> DVector<f64> {
        let du = self.dim_u();
        &self.basis_u * z.rows(0, du) + &self.basis_s * z.rows(du, self.dim_s())
    }

    pub fn residuals(&self) -> SplitResiduals {
        let d = self.dim();
        let id = DMatrix::<f64>::identity(d, d);
        SplitResiduals {
            sum_to_identity: max_abs(&(&self.proj_u + &self.proj_s - id)),
            idempotent_u: max_abs(&(&self.proj_u * &self.proj_u - &self.proj_u)),
            idempotent_s: max_abs(&(&self.proj_s * &self.proj_s - &self.proj_s)),
            commute_u: max_abs(&(&self.matrix * &self.proj_u - &self.proj_u * &self.matrix)),
            commute_s: max_abs(&(&self.matrix * &self.proj_s - &self.proj_s * &self.matrix)),
        }
    }

    pub fn resolvent_bound(&self) -> Result<f64, SplitError> {
        resolvent_bound(self.a, self.b)
    }

    /// The same splitting read in its own coordinates: `diag(L_u, L_s)` with
    /// the coordinate axes as bases.
    pub fn coordinate_form(&self) -> SplitLinearMap {
        let (d, du, ds) = (self.dim(), self.dim_u(), self.dim_s());
        let id = DMatrix::<f64>::identity(d, d);
        let basis_u = id.columns(0, du).into_owned();
        let basis_s = id.columns(du, ds).into_owned();
        let coord_u = id.rows(0, du).into_owned();
        let coord_s = id.rows(du, ds).into_owned();
        let mut matrix = DMatrix::zeros(d, d);
        matrix.view_mut((0, 0), (du, du)).copy_from(&self.l_u);
        matrix.view_mut((du, du), (ds, ds)).copy_from(&self.l_s);
        SplitLinearMap {
            matrix,
            rho: self.rho,
            proj_u: &basis_u * &coord_u,
            proj_s: &basis_s * &coord_s,
            basis_u,
            basis_s,
            coord_u,
            coord_s,
            l_u: self.l_u.clone(),
            l_u_inv: self.l_u_inv.clone(),
            l_s: self.l_s.clone(),
            a: self.a,
            b: self.b,
            min_unstable_modulus: self.min_unstable_modulus,
            max_stable_modulus: self.max_stable_modulus,
            margin_fraction: self.margin_fraction,
        }
    }
}

/// Bound `a/(a-1) + 1/(1-b)` on `|(I - L)^{-1}|` in the adapted norm.
pub fn resolvent_bound(a: f64, b: f64) -> Result<f64, SplitError> {
    if !(b < 1.0 && a > 1.0) {
        return Err(SplitError::NotHyperbolicAtUnitCircle { a, b });
    }
    // Written so that a = inf gives the limit 1.
    Ok(1.0 / (1.0 - 1.0 / a) + 1.0 / (1.0 - b))
}

/// Iterate-based norm on `X_u ⊕ X_s`.
///
/// On `X_s`: `|x|_s = max_{0<=n<=depth_s} rate_s^{-n} |L_s^n x|_2`, where
/// `depth_s + 1` is the first power with `|L_s^{depth_s+1}|_2 <= rate_s^{depth_s+1}`.
/// This makes `|L_s x|_s <= rate_s |x|_s` exact. The unstable part is the
/// same construction for `L_u^{-1}` and `1/rate_u`.
#[derive(Debug, Clone)]
pub struct AdaptedNorm {
    pub rate_u: f64,
    pub rate_s: f64,
    pub depth_u: usize,
    pub depth_s: usize,
    pub equiv_lo: f64,
    pub equiv_hi: f64,
    coord_u: DMatrix<f64>,
    coord_s: DMatrix<f64>,
    iter_u: Vec<DMatrix<f64>>,
    iter_s: Vec<DMatrix<f64>>,
}

/// Scaled powers `(l/rate)^n` for `n = 0..=depth` with the depth rule above.
fn scaled_powers(l: &DMatrix<f64>, rate: f64) -> Result<Vec<DMatrix<f64>>, SplitError> {
    let k = l.nrows();
    let step = l / rate;
    let mut powers = vec![DMatrix::<f64>::identity(k, k)];
    if k == 0 {
        return Ok(powers);
    }
    loop {
        let next = powers.last().unwrap() * &step;
        if spectral_norm(&next) <= 1.0 {
            return Ok(powers);
        }
        if powers.len() > MAX_DEPTH {
            return Err(SplitError::DepthOverflow(MAX_DEPTH));
        }
        powers.push(next);
    }
}

/// Adapted norm with `rate_s` between the stable spectral radius and `rho`, and
/// `rate_u` between `rho` and the smallest unstable modulus.
pub fn build_adapted_norm(
    split: &SplitLinearMap,
    rate_u: f64,
    rate_s: f64,
) -> Result<AdaptedNorm, SplitError> {
    if split.dim_s() > 0 {
        let lo = spectral_radius(&split.l_s)?;
        if !(rate_s > lo && rate_s < split.rho) {
            return Err(SplitError::RateOutsideSpectralGap {
                part: "stable",
                rate: rate_s,
                lo,
                hi: split.rho,
            });
        }
    }
    if split.dim_u() > 0 {
        let hi = split.min_unstable_modulus;
        if !(rate_u > split.rho && rate_u < hi) {
            return Err(SplitError::RateOutsideSpectralGap {
                part: "unstable",
                rate: rate_u,
                lo: split.rho,
                hi,
            });
        }
    }
    let iter_s = scaled_powers(&split.l_s, rate_s)?;
    let iter_u = scaled_powers(&split.l_u_inv, 1.0 / rate_u)?;
    let bound = |its: &[DMatrix<f64>]| its.iter().map(spectral_norm).fold(0.0, f64::max);
    let hi_u = bound(&iter_u) * spectral_norm(&split.coord_u);
    let hi_s = bound(&iter_s) * spectral_norm(&split.coord_s);
    let both = split.dim_u() > 0 && split.dim_s() > 0;
    Ok(AdaptedNorm {
        rate_u,
        rate_s,
        depth_u: iter_u.len() - 1,
        depth_s: iter_s.len() - 1,
        equiv_lo: if both { 0.5 } else { 1.0 },
        equiv_hi: hi_u.max(hi_s),
        coord_u: split.coord_u.clone(),
        coord_s: split.coord_s.clone(),
        iter_u,
        iter_s,
    })
}

/// Adapted norm at the split's own bounds: `|L_s| <= b` and `|L_u^{-1}| <= 1/a`.
pub fn canonical_norm(split: &SplitLinearMap) -> Result<AdaptedNorm, SplitError> {
    let rate_u = if split.dim_u() > 0 { split.a } else { f64::INFINITY };
    let rate_s = if split.dim_s() > 0 { split.b } else { 0.0 };
    build_adapted_norm(split, rate_u, rate_s)
}

fn iterate_norm(its: &[DMatrix<f64>], v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    its.iter().map(|p| (p * v).norm()).fold(0.0, f64::max)
}

impl AdaptedNorm {
    pub fn dim_u(&self) -> usize {
        self.coord_u.nrows()
    }

    pub fn dim_s(&self) -> usize {
        self.coord_s.nrows()
    }

    /// Norm of `X_u` coordinates.
    pub fn norm_u(&self, xi: &DVector<f64>) -> f64 {
        if self.depth_u == 0 {
            return xi.norm();
        }
        iterate_norm(&self.iter_u, xi)
    }

    /// Norm of `X_s` coordinates.
    pub fn norm_s(&self, eta: &DVector<f64>) -> f64 {
        if self.depth_s == 0 {
            return eta.norm();
        }
        iterate_norm(&self.iter_s, eta)
    }

    /// Norm of stacked split coordinates `(xi, eta)`.
    pub fn norm_coords(&self, z: &DVector<f64>) -> f64 {
        let du = self.dim_u();
        let xi = z.rows(0, du).into_owned();
        let eta = z.rows(du, self.dim_s()).into_owned();
        self.norm_u(&xi).max(self.norm_s(&eta))
    }

    /// The same norm acting directly on split coordinates.
    pub fn coordinate_form(&self) -> AdaptedNorm {
        let (du, ds) = (self.dim_u(), self.dim_s());
        let id = DMatrix::<f64>::identity(du + ds, du + ds);
        AdaptedNorm {
            coord_u: id.rows(0, du).into_owned(),
            coord_s: id.rows(du, ds).into_owned(),
            ..self.clone()
        }
    }

    /// Upper bound on the operator norm of `m` (acting on split coordinates)
    /// with respect to this norm, from the block structure and the stored iterates.
    pub fn operator_bound(&self, m: &DMatrix<f64>) -> f64 {
        let (du, ds) = (self.dim_u(), self.dim_s());
        let block = |its: &[DMatrix<f64>], r0: usize, nr: usize, c0: usize, nc: usize| {
            if nr == 0 || nc == 0 {
                return 0.0;
            }
            let b = m.view((r0, c0), (nr, nc)).into_owned();
            its.iter().map(|p| spectral_norm(&(p * &b))).fold(0.0, f64::max)
        };
        let row_u = block(&self.iter_u, 0, du, 0, du) + block(&self.iter_u, 0, du, du, ds);
        let row_s = block(&self.iter_s, du, ds, 0, du) + block(&self.iter_s, du, ds, du, ds);
        row_u.max(row_s)
    }

    /// Norm of an ambient vector.
    pub fn eval(&self, x: &DVector<f64>) -> Result<f64, SplitError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SplitError::NonFinite);
        }
        let xi = &self.coord_u * x;
        let eta = &self.coord_s * x;
        Ok(self.norm_u(&xi).max(self.norm_s(&eta)))
    }
}

/// Free-function form of [`AdaptedNorm::eval`].
pub fn eval_adapted_norm(norm: &AdaptedNorm, x: &DVector<f64>) -> Result<f64, SplitError> {
    norm.eval(x)
}
