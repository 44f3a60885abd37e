//! Dense linear algebra helpers, a damped Newton-Raphson maximizer, and a
//! finite-difference derivative checker.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stopping and damping controls for [`newton_maximize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewtonSettings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_halving_max: usize,
    pub ridge_floor: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            step_halving_max: 30,
            ridge_floor: 1e-10,
        }
    }
}

impl NewtonSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Validation("max_iterations must be >= 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::Validation("gradient_tolerance must be > 0".into()));
        }
        if self.ridge_floor < 0.0 {
            return Err(Error::Validation("ridge_floor must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of a Newton maximization.
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub argmax: DVector<f64>,
    pub objective: f64,
    /// Sup-norm of the gradient at `argmax`.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub hessian_at_optimum: DMatrix<f64>,
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Solves (-H + ridge I) p = g for the ascent direction p, growing the ridge
/// from `ridge_floor` until the shifted matrix is positive definite.
fn ascent_direction(
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    ridge_floor: f64,
) -> Option<DVector<f64>> {
    let neg_h = -hessian;
    if let Some(chol) = neg_h.clone().cholesky() {
        return Some(chol.solve(gradient));
    }
    let scale = hessian
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .max(1.0);
    let mut ridge = ridge_floor.max(f64::EPSILON * scale);
    for _ in 0..60 {
        let shifted = &neg_h + DMatrix::identity(neg_h.nrows(), neg_h.ncols()) * ridge;
        if let Some(chol) = shifted.cholesky() {
            return Some(chol.solve(gradient));
        }
        ridge *= 10.0;
    }
    None
}

/// Maximizes a smooth objective by damped Newton-Raphson.
///
/// `f` returns (value, gradient, Hessian) at a point. Steps that would lower
/// the objective are halved up to `step_halving_max` times; indefinite or
/// singular Hessians are shifted by a growing ridge. The returned objective
/// is never below the starting value.
pub fn newton_maximize<F>(
    f: F,
    start: &DVector<f64>,
    settings: &NewtonSettings,
) -> Result<NewtonResult>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>),
{
    settings.validate()?;
    let mut theta = start.clone();
    let (mut value, mut gradient, mut hessian) = f(&theta);
    if !value.is_finite() {
        return Err(Error::Convergence(format!(
            "objective is not finite at the start point ({value})"
        )));
    }

    let start_value = value;
    let mut best = (value, theta.clone(), gradient.clone(), hessian.clone());
    let mut iterations = 0;
    let mut converged = sup_norm(&gradient) <= settings.gradient_tolerance;

    while !converged && iterations < settings.max_iterations {
        iterations += 1;
        let direction = match ascent_direction(&hessian, &gradient, settings.ridge_floor) {
            Some(d) => d,
            None => break,
        };

        // allow round-off-level decreases so quadratic convergence is not
        // stalled by noise in the last digits of the objective
        let slack = (1.0 + value.abs()) * 1e-12;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.step_halving_max {
            let candidate = &theta + &direction * step;
            let (cand_value, cand_grad, cand_hess) = f(&candidate);
            if cand_value.is_finite() && cand_value >= value - slack {
                theta = candidate;
                value = cand_value;
                gradient = cand_grad;
                hessian = cand_hess;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if value > best.0 {
            best = (value, theta.clone(), gradient.clone(), hessian.clone());
        }
        converged = sup_norm(&gradient) <= settings.gradient_tolerance;
    }

    // the slack may have let the final point drift marginally below the
    // start; fall back to the best point seen in that case
    if value < start_value {
        (value, theta, gradient, hessian) = best;
        converged = sup_norm(&gradient) <= settings.gradient_tolerance;
    }

    Ok(NewtonResult {
        gradient_norm: sup_norm(&gradient),
        argmax: theta,
        objective: value,
        iterations,
        converged,
        hessian_at_optimum: hessian,
    })
}

/// Solves A X = B by full-pivot LU, reporting matrices that are singular to
/// working precision.
pub fn solve_linear(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Validation(format!(
            "solve_linear needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::Validation(format!(
            "dimension mismatch: A is {0}x{0} but B has {1} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("matrix has non-finite entries".into()));
    }
    let lu = a.clone().full_piv_lu();
    let diag: Vec<f64> = (0..a.nrows()).map(|i| lu.u()[(i, i)].abs()).collect();
    let max_pivot = diag.iter().cloned().fold(0.0f64, f64::max);
    let min_pivot = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if max_pivot == 0.0 || min_pivot <= max_pivot * 1e-13 {
        return Err(Error::Singular(format!(
            "pivot ratio {:.3e} below working precision",
            if max_pivot == 0.0 { 0.0 } else { min_pivot / max_pivot }
        )));
    }
    lu.solve(b)
        .ok_or_else(|| Error::Singular("LU solve failed".into()))
}

/// Checks an analytic gradient against central finite differences.
///
/// Returns the maximum over coordinates of
/// |analytic - numeric| / max(1, |analytic|).
pub fn finite_diff_check<F>(f: F, point: &DVector<f64>, step: f64) -> f64
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (_, analytic) = f(point);
    let mut worst = 0.0f64;
    let mut x = point.clone();
    for j in 0..point.len() {
        x[j] = point[j] + step;
        let up = f(&x).0;
        x[j] = point[j] - step;
        let down = f(&x).0;
        x[j] = point[j];
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Central-difference Jacobian of a vector-valued function, used by the
/// derivative checks for Hessians and cross blocks.
pub fn finite_diff_jacobian<F>(f: F, point: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(point).len();
    let n = point.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut x = point.clone();
    for j in 0..n {
        x[j] = point[j] + step;
        let up = f(&x);
        x[j] = point[j] - step;
        let down = f(&x);
        x[j] = point[j];
        for i in 0..m {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    jac
}

/// Max relative discrepancy between an analytic matrix and a reference,
/// normalized entrywise by max(1, |analytic|).
pub fn max_rel_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .fold(0.0f64, |worst, (&a, &r)| {
            worst.max((a - r).abs() / a.abs().max(1.0))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_converges_in_two_iterations() {
        // maximize -(theta - 3)^2
        let f = |t: &DVector<f64>| {
            let x = t[0];
            (
                -(x - 3.0) * (x - 3.0),
                DVector::from_vec(vec![-2.0 * (x - 3.0)]),
                DMatrix::from_vec(1, 1, vec![-2.0]),
            )
        };
        let res = newton_maximize(f, &DVector::zeros(1), &NewtonSettings::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        assert_relative_eq!(res.argmax[0], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn quartic_converges_to_zero() {
        // maximize -theta^4
        let f = |t: &DVector<f64>| {
            let x = t[0];
            (
                -x.powi(4),
                DVector::from_vec(vec![-4.0 * x.powi(3)]),
                DMatrix::from_vec(1, 1, vec![-12.0 * x * x]),
            )
        };
        let res = newton_maximize(f, &DVector::from_vec(vec![1.0]), &NewtonSettings::default())
            .unwrap();
        assert!(res.converged);
        assert!(res.argmax[0].abs() < 1e-2);
        assert!(res.gradient_norm <= 1e-8);
    }

    #[test]
    fn never_returns_lower_objective_than_start() {
        // objective with a nasty saddle at the start
        let f = |t: &DVector<f64>| {
            let (x, y) = (t[0], t[1]);
            let v = -(x * x * x * x) - y * y + 0.1 * x;
            (
                v,
                DVector::from_vec(vec![-4.0 * x * x * x + 0.1, -2.0 * y]),
                DMatrix::from_vec(2, 2, vec![-12.0 * x * x, 0.0, 0.0, -2.0]),
            )
        };
        let start = DVector::from_vec(vec![0.0, 1.0]);
        let start_value = f(&start).0;
        let res = newton_maximize(f, &start, &NewtonSettings::default()).unwrap();
        assert!(res.objective >= start_value);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = |_: &DVector<f64>| {
            (
                f64::NAN,
                DVector::zeros(1),
                DMatrix::from_vec(1, 1, vec![-1.0]),
            )
        };
        assert!(matches!(
            newton_maximize(f, &DVector::zeros(1), &NewtonSettings::default()),
            Err(Error::Convergence(_))
        ));
    }

    /// Two-parameter logistic log-likelihood maximized by Newton must agree
    /// with a dense grid search over a 2001^2 lattice.
    #[test]
    fn logistic_mle_matches_grid_search() {
        // 6 points, no separation
        let xs = [-2.0, -1.0, 0.0, 0.5, 1.0, 2.0];
        let ys = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let loglik = |b0: f64, b1: f64| -> f64 {
            xs.iter()
                .zip(ys.iter())
                .map(|(&x, &y)| {
                    let lin = b0 + b1 * x;
                    y * lin - softplus(lin)
                })
                .sum()
        };
        fn softplus(v: f64) -> f64 {
            v.max(0.0) + (-v.abs()).exp().ln_1p()
        }

        let f = |t: &DVector<f64>| {
            let (b0, b1) = (t[0], t[1]);
            let mut val = 0.0;
            let mut grad = DVector::zeros(2);
            let mut hess = DMatrix::zeros(2, 2);
            for (&x, &y) in xs.iter().zip(ys.iter()) {
                let lin = b0 + b1 * x;
                let p = 1.0 / (1.0 + (-lin).exp());
                val += y * lin - softplus(lin);
                grad[0] += y - p;
                grad[1] += (y - p) * x;
                let w = p * (1.0 - p);
                hess[(0, 0)] -= w;
                hess[(0, 1)] -= w * x;
                hess[(1, 0)] -= w * x;
                hess[(1, 1)] -= w * x * x;
            }
            (val, grad, hess)
        };
        let res = newton_maximize(f, &DVector::zeros(2), &NewtonSettings::default()).unwrap();
        assert!(res.converged);

        // grid oracle: 2001 x 2001 lattice on [-2, 2]^2, then local
        // refinement of the incumbent down to 2e-5 resolution
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=2000 {
            let b0 = -2.0 + 4.0 * i as f64 / 2000.0;
            for j in 0..=2000 {
                let b1 = -2.0 + 4.0 * j as f64 / 2000.0;
                let v = loglik(b0, b1);
                if v > best.0 {
                    best = (v, b0, b1);
                }
            }
        }
        let mut step = 0.002;
        for _ in 0..3 {
            step /= 10.0;
            let center = (best.1, best.2);
            for i in -10..=10 {
                for j in -10..=10 {
                    let b0 = center.0 + step * i as f64;
                    let b1 = center.1 + step * j as f64;
                    let v = loglik(b0, b1);
                    if v > best.0 {
                        best = (v, b0, b1);
                    }
                }
            }
        }
        assert!((res.argmax[0] - best.1).abs() < 1e-3);
        assert!((res.argmax[1] - best.2).abs() < 1e-3);
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let b = DMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = solve_linear(&DMatrix::identity(2, 2), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_diagonal_inverts_entries() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let x = solve_linear(&a, &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.5);
        assert_relative_eq!(x[(1, 1)], 0.25);
        assert_eq!(x[(0, 1)], 0.0);
    }

    #[test]
    fn solve_random_system_has_small_residual() {
        // fixed 9x9 well-conditioned system
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut a = DMatrix::from_fn(9, 9, |_, _| next());
        for i in 0..9 {
            a[(i, i)] += 5.0; // diagonally dominant
        }
        let b = DMatrix::from_fn(9, 3, |_, _| next());
        let x = solve_linear(&a, &b).unwrap();
        let resid = &a * &x - &b;
        let b_norm = b.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let r_norm = resid.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(r_norm <= 1e-8 * b_norm.max(1.0));
    }

    #[test]
    fn solve_singular_is_an_error() {
        let a = DMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            solve_linear(&a, &DMatrix::identity(2, 2)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn solve_inverse_roundtrip() {
        let a = DMatrix::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 5.0]);
        let a_inv = solve_linear(&a, &DMatrix::identity(3, 3)).unwrap();
        let eye = &a * &a_inv;
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((eye[(i, j)] - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn finite_diff_accepts_correct_gradient() {
        let f = |t: &DVector<f64>| (t[0] * t[0], DVector::from_vec(vec![2.0 * t[0]]));
        let err = finite_diff_check(f, &DVector::from_vec(vec![1.5]), 1e-5);
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn finite_diff_flags_corrupted_gradient() {
        // gradient deliberately off by +1
        let f = |t: &DVector<f64>| (t[0] * t[0], DVector::from_vec(vec![2.0 * t[0] + 1.0]));
        let err = finite_diff_check(f, &DVector::zeros(1), 1e-5);
        assert!((err - 1.0).abs() < 1e-6, "expected error ~1, got {err}");
    }
}
