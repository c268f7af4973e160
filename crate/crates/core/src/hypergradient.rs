//! Implicit-function hypergradient and its derivatives.
//!
//! The hypergradient corrects `∇_x f` for the dependence of the inner
//! minimiser on `x`:
//!
//! ```text
//! ∇̄_x f(x, y) = ∇_x f(x, y) − ∇²_xy g(x, y) [∇²_yy g(x, y)]⁻¹ ∇_y f(x, y)
//! ```
//!
//! At `y = y*(x)` it equals `∇Φ(x)`. The inner Hessian solve always goes
//! through a Cholesky factorization.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem_model::{BilevelProblem, Matrix, Vector};

/// Default relative step for finite differences of `Φ`.
pub const PHI_FD_STEP: f64 = 1e-4;
/// Default step for finite differences of the hypergradient along `y*(x)`.
pub const HYPERGRAD_FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct HypergradResult {
    pub value: Vector,
    /// `‖H_yy v − ∇_y f‖` for the solve `H_yy v = ∇_y f`.
    pub linear_solve_residual: f64,
}

pub fn hypergrad<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    y: &Vector,
) -> Result<HypergradResult> {
    let hyy = prob.hess_yy_g(x, y);
    let gyf = prob.grad_y_f(x, y);
    let (v, residual) = linalg::spd_solve(&hyy, &gyf)?;
    let value = prob.grad_x_f(x, y) - prob.hess_xy_g(x, y) * v;
    Ok(HypergradResult {
        value,
        linear_solve_residual: residual,
    })
}

/// Power-iteration estimate of the largest eigenvalue of a symmetric PSD matrix.
fn power_iteration(a: &Matrix, iters: usize) -> f64 {
    let n = a.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    // The Rayleigh quotient approaches from below; pad it so 1/L stays a
    // stable gradient step.
    lambda.max(a.diagonal().max()) * 1.05
}

/// Minimiser of `y ↦ g(x, y)`.
///
/// Uses the problem's closed form when it has one. Otherwise gradient descent
/// from the origin with step `1/L̂`, where `L̂` is a power-iteration estimate
/// of the top eigenvalue of `∇²_yy g` at the current iterate.
pub fn solve_inner<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    tol: f64,
    max_iters: usize,
) -> Result<Vector> {
    if !(tol > 0.0) {
        return Err(Error::Argument(format!(
            "inner solve tolerance must be positive, got {tol}"
        )));
    }
    if let Some(y) = prob.inner_solution(x) {
        return Ok(y);
    }
    solve_inner_iterative(prob, x, tol, max_iters)
}

/// The iterative branch of [`solve_inner`], also used to cross-check
/// closed-form inner solutions.
pub fn solve_inner_iterative<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    tol: f64,
    max_iters: usize,
) -> Result<Vector> {
    if !(tol > 0.0) {
        return Err(Error::Argument(format!(
            "inner solve tolerance must be positive, got {tol}"
        )));
    }
    let mut y = Vector::zeros(prob.d2());
    let mut grad = prob.grad_y_g(x, &y);
    let mut residual = grad.norm();
    for _ in 0..max_iters {
        if residual <= tol {
            return Ok(y);
        }
        let lip = power_iteration(&prob.hess_yy_g(x, &y), 50);
        if !(lip > 0.0) || !lip.is_finite() {
            return Err(Error::Numerical(
                "inner Hessian has no positive curvature".into(),
            ));
        }
        y -= &grad / lip;
        grad = prob.grad_y_g(x, &y);
        residual = grad.norm();
    }
    if residual <= tol {
        return Ok(y);
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        residual,
    })
}

const INNER_MAX_ITERS: usize = 100_000;

/// `Φ(x) = f(x, y*(x))`.
pub fn phi<P: BilevelProblem + ?Sized>(prob: &P, x: &Vector, tol: f64) -> Result<f64> {
    let y = solve_inner(prob, x, tol, INNER_MAX_ITERS)?;
    Ok(prob.f(x, &y))
}

/// Central finite differences of `Φ`, coordinate step `h·max(1, |x_i|)`.
///
/// Each inner solve runs at tolerance `min(tol, h²)`.
pub fn phi_grad_fd<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    h: f64,
    tol: f64,
) -> Result<Vector> {
    if !(h > 0.0) {
        return Err(Error::Argument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let inner_tol = tol.min(h * h);
    let mut grad = Vector::zeros(x.len());
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let fp = phi(prob, &xp, inner_tol)?;
        let fm = phi(prob, &xm, inner_tol)?;
        grad[i] = (fp - fm) / (xp[i] - xm[i]);
    }
    Ok(grad)
}

/// Jacobians of the hypergradient, `(∂∇̄_x f/∂x : d1×d1, ∂∇̄_x f/∂y : d1×d2)`,
/// in the usual layout `(i, j) = ∂[∇̄_x f]_i / ∂z_j`.
///
/// Analytic oracles are used when the problem supplies them; otherwise
/// central differences of [`hypergrad`] with step `1e-5·(1 + ‖(x, y)‖)`.
pub fn hypergrad_jacobians<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    y: &Vector,
) -> Result<(Matrix, Matrix)> {
    let jx = match prob.hypergrad_jac_x(x, y) {
        Some(j) => j,
        None => hypergrad_jacobians_fd(prob, x, y)?.0,
    };
    let jy = match prob.hypergrad_jac_y(x, y) {
        Some(j) => j,
        None => hypergrad_jacobians_fd(prob, x, y)?.1,
    };
    Ok((jx, jy))
}

/// Finite-difference branch of [`hypergrad_jacobians`].
pub fn hypergrad_jacobians_fd<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    y: &Vector,
) -> Result<(Matrix, Matrix)> {
    let h = 1e-5 * (1.0 + (x.norm_squared() + y.norm_squared()).sqrt());
    let (d1, d2) = (prob.d1(), prob.d2());
    let mut jx = DMatrix::zeros(d1, d1);
    for j in 0..d1 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (hypergrad(prob, &xp, y)?.value - hypergrad(prob, &xm, y)?.value) / (2.0 * h);
        jx.set_column(j, &col);
    }
    let mut jy = DMatrix::zeros(d1, d2);
    for j in 0..d2 {
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[j] += h;
        ym[j] -= h;
        let col = (hypergrad(prob, x, &yp)?.value - hypergrad(prob, x, &ym)?.value) / (2.0 * h);
        jy.set_column(j, &col);
    }
    Ok((jx, jy))
}

#[derive(Debug, Clone, Serialize)]
pub struct HyperHessian {
    #[serde(with = "crate::linalg::rows")]
    pub matrix: Matrix,
    /// Smallest eigenvalue of the symmetric part, to compare against `μ_f`.
    pub min_sym_eigenvalue: f64,
}

/// Outer curvature
/// `∇_x[∇̄_x f] − ∇²_xy g [∇²_yy g]⁻¹ ∇_y[∇̄_x f]`
/// with both derivative blocks in gradient layout (row index = variable
/// differentiated by). It is the transpose of the Jacobian of
/// `x ↦ ∇̄_x f(x, y*(x))` when evaluated at `y = y*(x)`.
pub fn hyper_hessian<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    y: &Vector,
) -> Result<HyperHessian> {
    let (jx, jy) = hypergrad_jacobians(prob, x, y)?;
    let hyy = prob.hess_yy_g(x, y);
    let chol = linalg::spd_cholesky(&hyy)?;
    let w = chol.solve(&jy.transpose());
    let matrix = jx.transpose() - prob.hess_xy_g(x, y) * w;
    let min_sym_eigenvalue = linalg::min_sym_eigenvalue(&matrix);
    Ok(HyperHessian {
        matrix,
        min_sym_eigenvalue,
    })
}

/// Central differences of `x ↦ ∇̄_x f(x, y*(x))`, transposed to match
/// [`hyper_hessian`]'s layout.
pub fn hyper_hessian_fd<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    h: f64,
    tol: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::Argument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let d1 = prob.d1();
    let mut jac = DMatrix::zeros(d1, d1);
    let along = |xv: &Vector| -> Result<Vector> {
        let y = solve_inner(prob, xv, tol, INNER_MAX_ITERS)?;
        Ok(hypergrad(prob, xv, &y)?.value)
    };
    for j in 0..d1 {
        let step = h * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (along(&xp)? - along(&xm)?) / (xp[j] - xm[j]);
        jac.set_column(j, &col);
    }
    Ok(jac.transpose())
}

/// Point-wise result of [`audit_gradients`].
#[derive(Debug, Clone, Serialize)]
pub struct PointAudit {
    pub x: Vec<f64>,
    pub hypergrad: Vec<f64>,
    pub phi_grad_fd: Vec<f64>,
    /// `‖∇̄f − ∇Φ_fd‖ / max(1, ‖∇Φ_fd‖)` at `y = y*(x)`.
    pub hypergrad_error: f64,
    /// Largest-deviation coordinate of the hypergradient.
    pub worst_coordinate: usize,
    /// Same relative form for the outer curvature against its
    /// finite-difference counterpart.
    pub hyper_hessian_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientAudit {
    pub points: Vec<PointAudit>,
    pub max_hypergrad_error: f64,
    pub max_hyper_hessian_error: f64,
    pub max_error: f64,
    /// Index into `points` of the largest hypergradient error.
    pub worst_point: usize,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares [`hypergrad`] with [`phi_grad_fd`] and [`hyper_hessian`] with
/// [`hyper_hessian_fd`] at each point, with the inner variable at `y*(x)`.
pub fn audit_gradients<P: BilevelProblem + ?Sized>(
    prob: &P,
    points: &[Vector],
    tolerance: f64,
) -> Result<GradientAudit> {
    if points.is_empty() {
        return Err(Error::Argument(
            "gradient audit needs at least one point".into(),
        ));
    }
    let rel = |diff: f64, reference: f64| diff / reference.max(1.0);
    let mut audits = Vec::with_capacity(points.len());
    for x in points {
        let y = solve_inner(prob, x, 1e-12, INNER_MAX_ITERS)?;
        let hg = hypergrad(prob, x, &y)?.value;
        let fd = phi_grad_fd(prob, x, PHI_FD_STEP, 1e-12)?;
        let diff = &hg - &fd;
        let worst_coordinate = diff.iamax();
        let hh = hyper_hessian(prob, x, &y)?.matrix;
        let hh_fd = hyper_hessian_fd(prob, x, HYPERGRAD_FD_STEP, 1e-12)?;
        audits.push(PointAudit {
            x: x.iter().copied().collect(),
            hypergrad: hg.iter().copied().collect(),
            phi_grad_fd: fd.iter().copied().collect(),
            hypergrad_error: rel(diff.norm(), fd.norm()),
            worst_coordinate,
            hyper_hessian_error: rel((&hh - &hh_fd).norm(), hh_fd.norm()),
        });
    }
    let worst_point = (0..audits.len())
        .max_by(|&a, &b| {
            audits[a]
                .hypergrad_error
                .total_cmp(&audits[b].hypergrad_error)
        })
        .unwrap_or(0);
    let max_hypergrad_error = audits[worst_point].hypergrad_error;
    let max_hyper_hessian_error = audits
        .iter()
        .map(|a| a.hyper_hessian_error)
        .fold(0.0, f64::max);
    let max_error = max_hypergrad_error.max(max_hyper_hessian_error);
    Ok(GradientAudit {
        worst_coordinate: audits[worst_point].worst_coordinate,
        points: audits,
        max_hypergrad_error,
        max_hyper_hessian_error,
        max_error,
        worst_point,
        tolerance,
        pass: max_error <= tolerance,
    })
}
