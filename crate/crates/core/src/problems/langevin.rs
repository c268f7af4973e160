use super::{matvec_into, require_spd};
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem_model::{BilevelProblem, Matrix, Vector};

/// Decoupled tuning toy: inner `V(z) = ½ zᵀ P z`, outer
/// `U(θ, z) = ½ ‖θ − (M z + m)‖²`.
///
/// The inner problem does not depend on `θ`, so `∇²_θz g = 0` and the
/// hypergradient reduces to `∇_θ U`. Optimum `(θ*, z*) = (m, 0)`.
#[derive(Debug, Clone)]
pub struct LangevinTuningToy {
    p: Matrix,
    m_map: Matrix,
    m: Vector,
    mu_g: f64,
}

pub fn langevin_toy(p: Matrix, m_map: Matrix, m: Vector) -> Result<LangevinTuningToy> {
    require_spd(&p, "P")?;
    if m_map.shape() != (m.len(), p.nrows()) {
        return Err(Error::Argument(format!(
            "M must be {}×{}, got {:?}",
            m.len(),
            p.nrows(),
            m_map.shape()
        )));
    }
    let mu_g = linalg::min_sym_eigenvalue(&p);
    Ok(LangevinTuningToy { p, m_map, m, mu_g })
}

impl LangevinTuningToy {
    fn target_gap(&self, theta: &Vector, z: &Vector) -> Vector {
        theta - (&self.m_map * z + &self.m)
    }
}

impl BilevelProblem for LangevinTuningToy {
    fn name(&self) -> &str {
        "langevin_toy"
    }

    fn d1(&self) -> usize {
        self.m.len()
    }

    fn d2(&self) -> usize {
        self.p.nrows()
    }

    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * self.target_gap(x, y).norm_squared()
    }

    fn grad_x_f(&self, x: &Vector, y: &Vector) -> Vector {
        self.target_gap(x, y)
    }

    fn grad_y_f(&self, x: &Vector, y: &Vector) -> Vector {
        -(self.m_map.transpose() * self.target_gap(x, y))
    }

    fn g(&self, _x: &Vector, y: &Vector) -> f64 {
        0.5 * y.dot(&(&self.p * y))
    }

    fn grad_y_g(&self, _x: &Vector, y: &Vector) -> Vector {
        &self.p * y
    }

    fn hess_yy_g(&self, _x: &Vector, _y: &Vector) -> Matrix {
        self.p.clone()
    }

    fn hess_xy_g(&self, _x: &Vector, _y: &Vector) -> Matrix {
        Matrix::zeros(self.d1(), self.d2())
    }

    fn mu_g(&self) -> f64 {
        self.mu_g
    }

    fn known_optimum(&self) -> Option<(Vector, Vector)> {
        Some((self.m.clone(), Vector::zeros(self.d2())))
    }

    fn inner_solution(&self, _x: &Vector) -> Option<Vector> {
        Some(Vector::zeros(self.d2()))
    }

    fn hypergrad_jac_x(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(Matrix::identity(self.d1(), self.d1()))
    }

    fn hypergrad_jac_y(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(-self.m_map.clone())
    }

    fn gradient_field(&self, x: &[f64], y: &[f64], hx: &mut [f64], gy: &mut [f64]) -> Result<()> {
        matvec_into(&self.m_map, y, hx);
        for ((h, &xi), &mi) in hx.iter_mut().zip(x).zip(self.m.iter()) {
            *h = xi - *h - mi;
        }
        matvec_into(&self.p, y, gy);
        Ok(())
    }
}
