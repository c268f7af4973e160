//! Built-in bilevel problems with closed-form inner solutions and optima.

mod corrupted;
mod langevin;
mod maml;
mod quadratic;

pub use corrupted::CorruptedGradient;
pub use langevin::{langevin_toy, LangevinTuningToy};
pub use maml::{make_maml, MamlQuadratic};
pub use quadratic::{quadratic_1d, QuadraticBilevel};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem_model::Matrix;

/// Random symmetric positive-definite matrix `Q diag(λ) Qᵀ` with `Q` from
/// the QR factorization of a Gaussian matrix and eigenvalues uniform in
/// `[lo, hi]`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, dim: usize, lo: f64, hi: f64) -> Matrix {
    let g: Matrix = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let eig = Uniform::new_inclusive(lo, hi).expect("valid eigenvalue range");
    let d: Matrix =
        DMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |_, _| eig.sample(rng)));
    linalg::symmetrize(&(&q * d * q.transpose()))
}

pub(crate) fn require_spd(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Argument(format!("{what} must be square")));
    }
    if linalg::asymmetry(m) > 1e-12 {
        return Err(Error::Argument(format!("{what} must be symmetric")));
    }
    let min = linalg::min_sym_eigenvalue(m);
    if !(min > 0.0) {
        return Err(Error::Argument(format!(
            "{what} must be positive definite (smallest eigenvalue {min:.3e})"
        )));
    }
    Ok(())
}

/// `out = m · v` on raw slices (column-major `m`).
#[inline]
pub(crate) fn matvec_into(m: &Matrix, v: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(v.len(), cols);
    debug_assert_eq!(out.len(), rows);
    out.iter_mut().for_each(|o| *o = 0.0);
    let data = m.as_slice();
    for (j, &vj) in v.iter().enumerate() {
        let col = &data[j * rows..(j + 1) * rows];
        for (o, &mij) in out.iter_mut().zip(col) {
            *o += mij * vj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergradient::{hypergrad, phi_grad_fd, solve_inner, solve_inner_iterative};
    use crate::problem_model::{random_points, stationarity_residuals, BilevelProblem, Vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn builtins() -> Vec<Box<dyn BilevelProblem>> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let quad = QuadraticBilevel::new(
            random_spd(&mut rng, 2, 0.5, 2.0),
            random_spd(&mut rng, 3, 0.5, 2.0),
            random_spd(&mut rng, 3, 0.5, 2.0),
            DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0)),
            Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        vec![
            Box::new(quadratic_1d()),
            Box::new(quad),
            Box::new(make_maml(3, 2, 7, 3.0).unwrap()),
            Box::new(
                langevin_toy(
                    random_spd(&mut rng, 3, 0.5, 2.0),
                    DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0)),
                    Vector::from_vec(vec![1.0, -2.0]),
                )
                .unwrap(),
            ),
        ]
    }

    #[test]
    fn stationarity_at_known_optima() {
        for p in builtins() {
            let (x, y) = p.known_optimum().unwrap();
            let (inner, outer) = stationarity_residuals(p.as_ref(), &x, &y).unwrap();
            assert!(
                inner <= 1e-8 && outer <= 1e-8,
                "{}: {inner} {outer}",
                p.name()
            );
        }
    }

    #[test]
    fn closed_form_inner_matches_iterative() {
        for p in builtins() {
            for (x, _) in random_points(p.as_ref(), 5, 1.5, 3) {
                let closed = solve_inner(p.as_ref(), &x, 1e-12, 10).unwrap();
                let iter = solve_inner_iterative(p.as_ref(), &x, 1e-11, 1_000_000).unwrap();
                assert!(
                    (&closed - &iter).norm() <= 1e-8 * (1.0 + closed.norm()),
                    "{}",
                    p.name()
                );
            }
        }
    }

    #[test]
    fn hypergradient_matches_phi_finite_differences() {
        for p in builtins() {
            for (x, _) in random_points(p.as_ref(), 20, 1.5, 17) {
                let y = solve_inner(p.as_ref(), &x, 1e-12, 10).unwrap();
                let hg = hypergrad(p.as_ref(), &x, &y).unwrap().value;
                let fd = phi_grad_fd(p.as_ref(), &x, 1e-4, 1e-12).unwrap();
                assert!(
                    (&hg - &fd).norm() <= 1e-5 * (1.0 + fd.norm()),
                    "{}: {hg} vs {fd}",
                    p.name()
                );
            }
        }
    }

    #[test]
    fn fast_gradient_field_matches_generic_path() {
        for p in builtins() {
            for (x, y) in random_points(p.as_ref(), 10, 2.0, 23) {
                let mut hx = vec![0.0; p.d1()];
                let mut gy = vec![0.0; p.d2()];
                p.gradient_field(x.as_slice(), y.as_slice(), &mut hx, &mut gy)
                    .unwrap();
                let hg = hypergrad(p.as_ref(), &x, &y).unwrap().value;
                let gyg = p.grad_y_g(&x, &y);
                let ex = (Vector::from_vec(hx) - &hg).norm();
                let ey = (Vector::from_vec(gy) - &gyg).norm();
                assert!(ex <= 1e-12 * (1.0 + hg.norm()), "{} {ex}", p.name());
                assert!(ey <= 1e-12 * (1.0 + gyg.norm()), "{} {ey}", p.name());
            }
        }
    }

    #[test]
    fn linear_solve_residual_is_tiny() {
        for p in builtins() {
            for (x, y) in random_points(p.as_ref(), 5, 2.0, 29) {
                let r = hypergrad(p.as_ref(), &x, &y).unwrap();
                let scale = p.grad_y_f(&x, &y).norm();
                assert!(r.linear_solve_residual <= 1e-10 * (1.0 + scale));
            }
        }
    }
}
