//! Linearization at the optimum and the limiting covariances of the
//! rescaled errors `γ₁(t)^{-1/2}(x_t − x*)` and `γ₂(t)^{-1/2}(y_t − y*)`.
//!
//! With `A₁₁ = −∂∇̄_x f/∂x`, `A₁₂ = −∂∇̄_x f/∂y`, `A₂₁ = −∂∇_y g/∂x`,
//! `A₂₂ = −∇²_yy g` at `(x*, y*)` and `H = A₁₁ − A₁₂ A₂₂⁻¹ A₂₁`, the limits
//! solve the Lyapunov equations
//!
//! ```text
//! H Σ_x + Σ_x Hᵀ + Q_x = 0,        A₂₂ Σ_y + Σ_y A₂₂ᵀ + Γ₂₂ = 0,
//! Q_x = Γ₁₁ + W Γ₂₂ Wᵀ − Γ₁₂ Wᵀ − W Γ₂₁,      W = A₁₂ A₂₂⁻¹,
//! ```
//!
//! equivalently `Σ = ∫₀^∞ e^{At} Q e^{Aᵀt} dt`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hypergradient::{hypergrad_jacobians, HYPERGRAD_FD_STEP};
use crate::linalg::{self, rows};
use crate::problem_model::{stationarity_residuals, BilevelProblem, Matrix, Vector};
use crate::sde_engine::NoiseModel;

/// Eigenvalue real parts must lie below this for a matrix to count as
/// Hurwitz.
pub const HURWITZ_MARGIN: f64 = -1e-8;
/// Largest stationarity residual accepted by [`linearize`].
pub const STATIONARITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearizationMatrices {
    #[serde(with = "rows")]
    pub a11: Matrix,
    #[serde(with = "rows")]
    pub a12: Matrix,
    #[serde(with = "rows")]
    pub a21: Matrix,
    #[serde(with = "rows")]
    pub a22: Matrix,
    #[serde(with = "rows")]
    pub h: Matrix,
}

impl LinearizationMatrices {
    /// Assembles the blocks and the Schur complement `H`.
    pub fn from_blocks(a11: Matrix, a12: Matrix, a21: Matrix, a22: Matrix) -> Result<Self> {
        let d1 = a11.nrows();
        let d2 = a22.nrows();
        if a11.shape() != (d1, d1)
            || a12.shape() != (d1, d2)
            || a21.shape() != (d2, d1)
            || a22.shape() != (d2, d2)
        {
            return Err(Error::Argument(
                "linearization blocks have inconsistent shapes".into(),
            ));
        }
        let h = &a11 - &a12 * linalg::lu_solve_matrix(&a22, &a21)?;
        Ok(Self {
            a11,
            a12,
            a21,
            a22,
            h,
        })
    }

    /// `A₁₂ A₂₂⁻¹`.
    pub fn coupling(&self) -> Result<Matrix> {
        Ok(linalg::lu_solve_matrix(&self.a22.transpose(), &self.a12.transpose())?.transpose())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseLimits {
    #[serde(with = "rows")]
    pub g11: Matrix,
    #[serde(with = "rows")]
    pub g22: Matrix,
    #[serde(with = "rows")]
    pub g12: Matrix,
}

impl NoiseLimits {
    pub fn new(g11: Matrix, g22: Matrix, g12: Matrix) -> Result<Self> {
        let limits = Self { g11, g22, g12 };
        let (d1, d2) = (limits.g11.nrows(), limits.g22.nrows());
        if limits.g11.shape() != (d1, d1)
            || limits.g22.shape() != (d2, d2)
            || limits.g12.shape() != (d1, d2)
        {
            return Err(Error::Argument(
                "noise limit blocks have inconsistent shapes".into(),
            ));
        }
        linalg::psd_factor(&limits.joint(), 1e-10)?;
        Ok(limits)
    }

    pub fn from_noise(noise: &NoiseModel) -> Result<Self> {
        let (g11, g22, g12) = noise.limit_covariances();
        Self::new(g11, g22, g12)
    }

    /// `Γ₂₁`, taken as `Γ₁₂ᵀ`.
    pub fn g21(&self) -> Matrix {
        self.g12.transpose()
    }

    pub fn joint(&self) -> Matrix {
        let (d1, d2) = (self.g11.nrows(), self.g22.nrows());
        let mut m = DMatrix::zeros(d1 + d2, d1 + d2);
        m.view_mut((0, 0), (d1, d1)).copy_from(&self.g11);
        m.view_mut((d1, d1), (d2, d2)).copy_from(&self.g22);
        m.view_mut((0, d1), (d1, d2)).copy_from(&self.g12);
        m.view_mut((d1, 0), (d2, d1)).copy_from(&self.g21());
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltPrediction {
    pub linearization: LinearizationMatrices,
    pub noise_limits: NoiseLimits,
    pub hurwitz_margin_a22: f64,
    pub hurwitz_margin_h: f64,
    #[serde(with = "rows")]
    pub q_x: Matrix,
    #[serde(with = "rows")]
    pub sigma_x: Matrix,
    #[serde(with = "rows")]
    pub sigma_y: Matrix,
    /// Relative residuals of the two Lyapunov equations.
    pub lyapunov_residuals: (f64, f64),
}

/// Negated Jacobians of `(∇̄_x f, ∇_y g)` at a stationary point.
pub fn linearize<P: BilevelProblem + ?Sized>(
    prob: &P,
    x_star: &Vector,
    y_star: &Vector,
) -> Result<LinearizationMatrices> {
    if x_star.len() != prob.d1() || y_star.len() != prob.d2() {
        return Err(Error::Argument("optimum has the wrong dimensions".into()));
    }
    let (inner, outer) = stationarity_residuals(prob, x_star, y_star)?;
    if inner > STATIONARITY_TOL || outer > STATIONARITY_TOL {
        return Err(Error::Argument(format!(
            "linearization point is not stationary (‖∇_y g‖ = {inner:.3e}, ‖∇̄_x f‖ = {outer:.3e})"
        )));
    }
    let (jx, jy) = hypergrad_jacobians(prob, x_star, y_star)?;
    let a21 = -prob.hess_xy_g(x_star, y_star).transpose();
    let a22 = -prob.hess_yy_g(x_star, y_star);
    LinearizationMatrices::from_blocks(-jx, -jy, a21, a22)
}

/// Largest real part of the spectrum of `m`.
pub fn hurwitz_margin(m: &Matrix) -> Result<f64> {
    linalg::max_real_eigenvalue(m)
}

fn require_hurwitz(m: &Matrix) -> Result<f64> {
    let margin = hurwitz_margin(m)?;
    if !(margin < HURWITZ_MARGIN) {
        return Err(Error::Stability { margin });
    }
    Ok(margin)
}

/// `Q_x = Γ₁₁ + W Γ₂₂ Wᵀ − Γ₁₂ Wᵀ − W Γ₂₁` with `W = A₁₂ A₂₂⁻¹`, symmetrized.
pub fn assemble_qx(lin: &LinearizationMatrices, limits: &NoiseLimits) -> Result<Matrix> {
    if limits.g11.shape() != lin.a11.shape() || limits.g22.shape() != lin.a22.shape() {
        return Err(Error::Argument(
            "noise limits do not match the linearization".into(),
        ));
    }
    let w = lin.coupling()?;
    let wt = w.transpose();
    let q = &limits.g11 + &w * &limits.g22 * &wt - &limits.g12 * &wt - &w * limits.g21();
    Ok(linalg::symmetrize(&q))
}

fn lyapunov_residual(a: &Matrix, sigma: &Matrix, q: &Matrix) -> Matrix {
    a * sigma + sigma * a.transpose() + q
}

fn relative(residual: f64, q: &Matrix) -> f64 {
    let qn = q.norm();
    if qn == 0.0 {
        residual
    } else {
        residual / qn
    }
}

/// Solves `A Σ + Σ Aᵀ + Q = 0` through the `d² × d²` Kronecker system
/// `(I ⊗ A + A ⊗ I) vec Σ = −vec Q`, with one round of iterative refinement.
pub fn lyapunov_solve(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let d = a.nrows();
    if a.ncols() != d || q.shape() != (d, d) {
        return Err(Error::Argument(
            "Lyapunov operands must be square and conformant".into(),
        ));
    }
    if linalg::asymmetry(q) > 1e-12 {
        return Err(Error::Argument(
            "Lyapunov right-hand side must be symmetric".into(),
        ));
    }
    require_hurwitz(a)?;
    if q.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(d, d));
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let lu = op.lu();
    let rhs = -nalgebra::DVector::from_column_slice(q.as_slice());
    let mut vec_sigma = lu.solve(&rhs).ok_or(Error::Singular {
        min_eigenvalue: 0.0,
    })?;
    let correction = {
        let sigma = DMatrix::from_column_slice(d, d, vec_sigma.as_slice());
        let r = lyapunov_residual(a, &sigma, q);
        lu.solve(&-nalgebra::DVector::from_column_slice(r.as_slice()))
    };
    if let Some(c) = correction {
        vec_sigma += c;
    }
    let sigma = linalg::symmetrize(&DMatrix::from_column_slice(d, d, vec_sigma.as_slice()));
    let res = relative(lyapunov_residual(a, &sigma, q).norm(), q);
    if !(res <= 1e-10) {
        return Err(Error::Accuracy(format!(
            "Lyapunov residual {res:.3e} exceeds 1e-10 relative"
        )));
    }
    Ok(sigma)
}

/// Relative residual `‖A Σ + Σ Aᵀ + Q‖_F / ‖Q‖_F`.
pub fn lyapunov_relative_residual(a: &Matrix, sigma: &Matrix, q: &Matrix) -> f64 {
    relative(lyapunov_residual(a, sigma, q).norm(), q)
}

/// `e^M` by scaling and squaring with a Padé approximant.
pub fn matrix_exp(m: &Matrix) -> Result<Matrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::Argument(
            "matrix exponential needs a square matrix".into(),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "matrix exponential of a non-finite matrix".into(),
        ));
    }
    // Decaying exponentials of large Hurwitz matrices are fine; growth
    // shows up as overflow below. This only bounds the squaring count.
    if m.column_iter().map(|c| c.lp_norm(1)).fold(0.0, f64::max) > 1e12 {
        return Err(Error::Numerical(
            "matrix exponential argument too large".into(),
        ));
    }
    let e = m.exp();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential overflowed".into()));
    }
    Ok(e)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let n = order as f64;
    for i in 0..order.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}

const PANEL_ORDER: usize = 8;

/// Direct quadrature of `∫₀^{t_max} e^{At} Q e^{Aᵀt} dt` with composite
/// 8-point Gauss–Legendre panels (`n_nodes` rounded up to a multiple of 8).
///
/// Independent of [`lyapunov_solve`]: every node evaluates its own matrix
/// exponential.
pub fn lyapunov_quadrature_oracle(
    a: &Matrix,
    q: &Matrix,
    t_max: f64,
    n_nodes: usize,
) -> Result<Matrix> {
    let d = a.nrows();
    if a.ncols() != d || q.shape() != (d, d) {
        return Err(Error::Argument(
            "quadrature operands must be square and conformant".into(),
        ));
    }
    if !(t_max > 0.0) || n_nodes == 0 {
        return Err(Error::Argument(
            "quadrature needs t_max > 0 and at least one node".into(),
        ));
    }
    require_hurwitz(a)?;
    if q.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(d, d));
    }
    let tail = matrix_exp(&(a * t_max))?.norm();
    if tail > 1e-12 {
        return Err(Error::Accuracy(format!(
            "‖exp(A·t_max)‖ = {tail:.3e} > 1e-12; increase t_max"
        )));
    }
    let panels = n_nodes.div_ceil(PANEL_ORDER);
    let width = t_max / panels as f64;
    let (nodes, weights) = gauss_legendre(PANEL_ORDER);
    let mut acc = DMatrix::zeros(d, d);
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * width;
        for (&u, &w) in nodes.iter().zip(&weights) {
            let t = mid + 0.5 * width * u;
            let e = matrix_exp(&(a * t))?;
            acc += (&e * q * e.transpose()) * (0.5 * width * w);
        }
    }
    Ok(linalg::symmetrize(&acc))
}

/// Full prediction pipeline at a known optimum.
pub fn predict<P: BilevelProblem + ?Sized>(
    prob: &P,
    noise: &NoiseModel,
    x_star: &Vector,
    y_star: &Vector,
) -> Result<CltPrediction> {
    let linearization = linearize(prob, x_star, y_star).map_err(|e| e.at("linearize"))?;
    predict_from_linearization(linearization, noise)
}

/// The prediction pipeline after linearization.
pub fn predict_from_linearization(
    linearization: LinearizationMatrices,
    noise: &NoiseModel,
) -> Result<CltPrediction> {
    let hurwitz_margin_a22 =
        require_hurwitz(&linearization.a22).map_err(|e| e.at("A22 stability"))?;
    let hurwitz_margin_h = require_hurwitz(&linearization.h).map_err(|e| e.at("H stability"))?;
    let noise_limits = NoiseLimits::from_noise(noise).map_err(|e| e.at("noise limits"))?;
    let q_x = assemble_qx(&linearization, &noise_limits).map_err(|e| e.at("assemble Q_x"))?;
    let sigma_x = lyapunov_solve(&linearization.h, &q_x).map_err(|e| e.at("Sigma_x"))?;
    let sigma_y =
        lyapunov_solve(&linearization.a22, &noise_limits.g22).map_err(|e| e.at("Sigma_y"))?;
    let lyapunov_residuals = (
        lyapunov_relative_residual(&linearization.h, &sigma_x, &q_x),
        lyapunov_relative_residual(&linearization.a22, &sigma_y, &noise_limits.g22),
    );
    Ok(CltPrediction {
        linearization,
        noise_limits,
        hurwitz_margin_a22,
        hurwitz_margin_h,
        q_x,
        sigma_x,
        sigma_y,
        lyapunov_residuals,
    })
}

/// Central-difference step used when auditing the linearization against its
/// finite-difference counterpart.
pub const LINEARIZATION_FD_STEP: f64 = HYPERGRAD_FD_STEP;
