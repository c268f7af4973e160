use nalgebra::{DMatrix, DVector};

use super::{matvec_into, require_spd};
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem_model::{BilevelProblem, Matrix, Vector};

/// Quadratic bilevel problem
///
/// ```text
/// f(x, y) = ½ xᵀ P_f x + ½ yᵀ R_f y
/// g(x, y) = ½ (y − Cᵀx − c₀)ᵀ P_g (y − Cᵀx − c₀)
/// ```
///
/// with inner solution `y*(x) = Cᵀx + c₀`.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    p_f: Matrix,
    r_f: Matrix,
    p_g: Matrix,
    c: Matrix,
    c0: Vector,
    mu_g: f64,
    // C R_f (d1×d2), P_g Cᵀ (d2×d1), P_g c₀
    c_rf: Matrix,
    pg_ct: Matrix,
    pg_c0: Vector,
    x_star: Vector,
    y_star: Vector,
}

impl QuadraticBilevel {
    pub fn new(p_f: Matrix, r_f: Matrix, p_g: Matrix, c: Matrix, c0: Vector) -> Result<Self> {
        require_spd(&p_f, "P_f")?;
        require_spd(&r_f, "R_f")?;
        require_spd(&p_g, "P_g")?;
        let (d1, d2) = (p_f.nrows(), p_g.nrows());
        if r_f.nrows() != d2 || c.shape() != (d1, d2) || c0.len() != d2 {
            return Err(Error::Argument(format!(
                "quadratic problem blocks have inconsistent shapes (d1 = {d1}, d2 = {d2})"
            )));
        }
        let c_rf = &c * &r_f;
        let pg_ct = &p_g * c.transpose();
        let pg_c0 = &p_g * &c0;
        // ∇Φ(x) = P_f x + C R_f (Cᵀx + c₀) = 0
        let outer = &p_f + &c_rf * c.transpose();
        let rhs = -(&c_rf * &c0);
        let (x_star, _) = linalg::spd_solve(&linalg::symmetrize(&outer), &rhs)?;
        let y_star = c.transpose() * &x_star + &c0;
        let mu_g = linalg::min_sym_eigenvalue(&p_g);
        Ok(Self {
            p_f,
            r_f,
            p_g,
            c,
            c0,
            mu_g,
            c_rf,
            pg_ct,
            pg_c0,
            x_star,
            y_star,
        })
    }

    /// Overrides the claimed strong-convexity constant.
    pub fn with_mu_g(mut self, mu_g: f64) -> Self {
        self.mu_g = mu_g;
        self
    }

    fn inner_residual(&self, x: &Vector, y: &Vector) -> Vector {
        y - self.c.transpose() * x - &self.c0
    }
}

/// `f = ½(x² + y²)`, `g = ½(y − x)²`: optimum at the origin, `y*(x) = x`.
pub fn quadratic_1d() -> QuadraticBilevel {
    let one = || DMatrix::identity(1, 1);
    QuadraticBilevel::new(one(), one(), one(), one(), DVector::zeros(1))
        .expect("scalar quadratic is well-posed")
}

impl BilevelProblem for QuadraticBilevel {
    fn name(&self) -> &str {
        if self.p_f.nrows() == 1 && self.p_g.nrows() == 1 {
            "quadratic1d"
        } else {
            "quadratic"
        }
    }

    fn d1(&self) -> usize {
        self.p_f.nrows()
    }

    fn d2(&self) -> usize {
        self.p_g.nrows()
    }

    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * x.dot(&(&self.p_f * x)) + 0.5 * y.dot(&(&self.r_f * y))
    }

    fn grad_x_f(&self, x: &Vector, _y: &Vector) -> Vector {
        &self.p_f * x
    }

    fn grad_y_f(&self, _x: &Vector, y: &Vector) -> Vector {
        &self.r_f * y
    }

    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        let r = self.inner_residual(x, y);
        0.5 * r.dot(&(&self.p_g * &r))
    }

    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        &self.p_g * self.inner_residual(x, y)
    }

    fn hess_yy_g(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.p_g.clone()
    }

    fn hess_xy_g(&self, _x: &Vector, _y: &Vector) -> Matrix {
        -(&self.c * &self.p_g)
    }

    fn mu_g(&self) -> f64 {
        self.mu_g
    }

    fn known_optimum(&self) -> Option<(Vector, Vector)> {
        Some((self.x_star.clone(), self.y_star.clone()))
    }

    fn inner_solution(&self, x: &Vector) -> Option<Vector> {
        Some(self.c.transpose() * x + &self.c0)
    }

    fn hypergrad_jac_x(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(self.p_f.clone())
    }

    fn hypergrad_jac_y(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(self.c_rf.clone())
    }

    fn gradient_field(&self, x: &[f64], y: &[f64], hx: &mut [f64], gy: &mut [f64]) -> Result<()> {
        // ∇̄_x f = P_f x + C R_f y
        matvec_into(&self.p_f, x, hx);
        let d1 = hx.len();
        let data = self.c_rf.as_slice();
        for (j, &yj) in y.iter().enumerate() {
            for i in 0..d1 {
                hx[i] += data[j * d1 + i] * yj;
            }
        }
        // ∇_y g = P_g y − P_g Cᵀ x − P_g c₀
        matvec_into(&self.p_g, y, gy);
        let d2 = gy.len();
        let data = self.pg_ct.as_slice();
        for (j, &xj) in x.iter().enumerate() {
            for i in 0..d2 {
                gy[i] -= data[j * d2 + i] * xj;
            }
        }
        for (g, b) in gy.iter_mut().zip(self.pg_c0.iter()) {
            *g -= b;
        }
        Ok(())
    }
}
