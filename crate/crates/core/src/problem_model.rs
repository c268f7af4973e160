//! The bilevel problem abstraction and sampled assumption checks.
//!
//! A problem is the pair of objectives `f` (outer) and `g` (inner) over
//! `x ∈ ℝ^d1`, `y ∈ ℝ^d2`, together with derivative oracles. The outer
//! problem minimises `Φ(x) = f(x, y*(x))` where `y*(x)` minimises `g(x, ·)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Derivative oracles for a bilevel problem.
///
/// Implementations must be immutable after construction; every method is a
/// pure function of its arguments.
pub trait BilevelProblem: Send + Sync {
    fn name(&self) -> &str;

    fn d1(&self) -> usize;
    fn d2(&self) -> usize;

    fn f(&self, x: &Vector, y: &Vector) -> f64;
    fn grad_x_f(&self, x: &Vector, y: &Vector) -> Vector;
    fn grad_y_f(&self, x: &Vector, y: &Vector) -> Vector;

    fn g(&self, x: &Vector, y: &Vector) -> f64;
    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector;
    /// `∇²_yy g`, `d2 × d2`.
    fn hess_yy_g(&self, x: &Vector, y: &Vector) -> Matrix;
    /// `∇²_xy g`, `d1 × d2`: entry `(i, j)` is `∂²g / ∂x_i ∂y_j`.
    fn hess_xy_g(&self, x: &Vector, y: &Vector) -> Matrix;

    /// Claimed strong-convexity constant of `g(x, ·)`.
    fn mu_g(&self) -> f64;

    fn known_optimum(&self) -> Option<(Vector, Vector)> {
        None
    }

    fn inner_solution(&self, _x: &Vector) -> Option<Vector> {
        None
    }

    /// Analytic Jacobian of the hypergradient with respect to `x` (`d1 × d1`).
    fn hypergrad_jac_x(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        None
    }

    /// Analytic Jacobian of the hypergradient with respect to `y` (`d1 × d2`).
    fn hypergrad_jac_y(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        None
    }

    /// Writes the hypergradient into `hx` and `∇_y g` into `gy`.
    ///
    /// This is the integrator's hot path. The default goes through the generic
    /// Cholesky-based hypergradient; built-in problems override it with
    /// allocation-free closed forms.
    fn gradient_field(&self, x: &[f64], y: &[f64], hx: &mut [f64], gy: &mut [f64]) -> Result<()> {
        let xv = Vector::from_column_slice(x);
        let yv = Vector::from_column_slice(y);
        let h = crate::hypergradient::hypergrad(self, &xv, &yv)?;
        hx.copy_from_slice(h.value.as_slice());
        gy.copy_from_slice(self.grad_y_g(&xv, &yv).as_slice());
        Ok(())
    }
}

/// Evidence gathered by [`check_assumptions`].
///
/// Lipschitz numbers are the largest difference quotients observed over the
/// sampled perturbations. They are lower bounds on the true constants, not
/// certificates.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub samples: usize,
    pub min_hess_eigenvalue: f64,
    pub mu_g: f64,
    pub strong_convexity_violated: bool,
    pub lipschitz_grad_y_g: f64,
    pub lipschitz_grad_x_f: f64,
    pub lipschitz_grad_y_f: f64,
    pub max_symmetry_residual: f64,
    pub symmetry_violated: bool,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        !self.strong_convexity_violated && !self.symmetry_violated
    }
}

const SYMMETRY_TOL: f64 = 1e-10;
const DIRECTIONS_PER_POINT: usize = 4;

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
    let v = Vector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    let n = v.norm();
    if n == 0.0 {
        return Vector::zeros(dim);
    }
    v * (scale / n)
}

fn quotient(a: &Vector, b: &Vector, step: &Vector) -> f64 {
    let s = step.norm();
    if s == 0.0 {
        0.0
    } else {
        (a - b).norm() / s
    }
}

/// Sampled check of the regularity assumptions at the given points.
///
/// Strong convexity and Hessian symmetry are checked exactly at each point;
/// the Lipschitz columns are randomized difference quotients with step sizes
/// drawn log-uniformly in `[1e-3, 1]·(1 + ‖point‖)`.
pub fn check_assumptions<P: BilevelProblem + ?Sized>(
    prob: &P,
    sample_points: &[(Vector, Vector)],
    seed: u64,
) -> Result<AssumptionReport> {
    if sample_points.is_empty() {
        return Err(Error::Argument(
            "check_assumptions needs at least one sample point".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_step = Uniform::new(-3.0f64, 0.0).expect("valid range");

    let mut min_eig = f64::INFINITY;
    let mut max_sym = 0.0f64;
    let (mut lip_gyg, mut lip_gxf, mut lip_gyf) = (0.0f64, 0.0f64, 0.0f64);

    for (x, y) in sample_points {
        if x.len() != prob.d1() || y.len() != prob.d2() {
            return Err(Error::Argument("sample point has wrong dimensions".into()));
        }
        let hyy = prob.hess_yy_g(x, y);
        min_eig = min_eig.min(linalg::min_sym_eigenvalue(&hyy));
        max_sym = max_sym.max(linalg::asymmetry(&hyy));

        let scale = 1.0 + (x.norm_squared() + y.norm_squared()).sqrt();
        let gyg = prob.grad_y_g(x, y);
        let gxf = prob.grad_x_f(x, y);
        let gyf = prob.grad_y_f(x, y);
        for _ in 0..DIRECTIONS_PER_POINT {
            let h = scale * 10f64.powf(log_step.sample(&mut rng));
            let dy = random_direction(&mut rng, prob.d2(), h);
            let y2 = y + &dy;
            lip_gyg = lip_gyg.max(quotient(&prob.grad_y_g(x, &y2), &gyg, &dy));
            lip_gxf = lip_gxf.max(quotient(&prob.grad_x_f(x, &y2), &gxf, &dy));
            lip_gyf = lip_gyf.max(quotient(&prob.grad_y_f(x, &y2), &gyf, &dy));

            let dx = random_direction(&mut rng, prob.d1(), h);
            let x2 = x + &dx;
            lip_gyf = lip_gyf.max(quotient(&prob.grad_y_f(&x2, y), &gyf, &dx));
        }
    }

    Ok(AssumptionReport {
        samples: sample_points.len(),
        min_hess_eigenvalue: min_eig,
        mu_g: prob.mu_g(),
        strong_convexity_violated: min_eig < prob.mu_g() || prob.mu_g() <= 0.0,
        lipschitz_grad_y_g: lip_gyg,
        lipschitz_grad_x_f: lip_gxf,
        lipschitz_grad_y_f: lip_gyf,
        max_symmetry_residual: max_sym,
        symmetry_violated: max_sym > SYMMETRY_TOL,
    })
}

/// Residuals `(‖∇_y g(x*, y*)‖, ‖∇̄_x f(x*, y*)‖)` at the known optimum.
pub fn stationarity_residuals<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &Vector,
    y: &Vector,
) -> Result<(f64, f64)> {
    let inner = prob.grad_y_g(x, y).norm();
    let outer = crate::hypergradient::hypergrad(prob, x, y)?.value.norm();
    Ok((inner, outer))
}

/// Seeded sample points drawn from a standard normal in `ℝ^{d1} × ℝ^{d2}`
/// scaled by `radius`.
pub fn random_points<P: BilevelProblem + ?Sized>(
    prob: &P,
    count: usize,
    radius: f64,
    seed: u64,
) -> Vec<(Vector, Vector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = Vector::from_fn(prob.d1(), |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                radius * z
            });
            let y = Vector::from_fn(prob.d2(), |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                radius * z
            });
            (x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{quadratic_1d, QuadraticBilevel};
    use approx::assert_relative_eq;

    #[test]
    fn identity_hessian_passes() {
        let prob = quadratic_1d();
        let pts = random_points(&prob, 10, 2.0, 3);
        let report = check_assumptions(&prob, &pts, 7).unwrap();
        assert_relative_eq!(report.min_hess_eigenvalue, 1.0, max_relative = 1e-14);
        assert!(report.passed());
        // ∇_y g = y − x has Lipschitz constant exactly 1 in y
        assert_relative_eq!(report.lipschitz_grad_y_g, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn weak_curvature_is_flagged() {
        let prob = QuadraticBilevel::new(
            Matrix::identity(1, 1),
            Matrix::identity(2, 2),
            Matrix::from_diagonal(&Vector::from_vec(vec![0.1, 1.0])),
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Vector::zeros(2),
        )
        .unwrap()
        .with_mu_g(0.5);
        let pts = random_points(&prob, 3, 1.0, 1);
        let report = check_assumptions(&prob, &pts, 1).unwrap();
        assert!(report.strong_convexity_violated);
        assert_relative_eq!(report.min_hess_eigenvalue, 0.1, max_relative = 1e-12);
    }

    #[test]
    fn empty_sample_list_is_rejected() {
        let prob = quadratic_1d();
        assert!(matches!(
            check_assumptions(&prob, &[], 0),
            Err(Error::Argument(_))
        ));
    }
}
