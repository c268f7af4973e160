use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::{matvec_into, random_spd, require_spd};
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem_model::{BilevelProblem, Matrix, Vector};

/// Regularised meta-learning with quadratic task losses.
///
/// Outer variable `θ ∈ ℝ^p`, inner variable the stack `(θ₁, …, θ_N)`.
/// Task losses `ℒᵢ(v) = ½ (v − μᵢ)ᵀ Cᵢ (v − μᵢ)`; inner objectives
/// `𝒥ᵢ(θ, θᵢ) = ℒᵢ(θᵢ) + (λ/2) ‖θᵢ − θ‖²`, `g = Σ 𝒥ᵢ`, `f = Σ ℒᵢ(θᵢ)`.
///
/// The quadratic losses stand in for the large-sample negative
/// log-likelihood of linear-drift diffusions, which is quadratic in the
/// drift parameter.
#[derive(Debug, Clone)]
pub struct MamlQuadratic {
    p: usize,
    cs: Vec<Matrix>,
    mus: Vec<Vector>,
    lambda: f64,
    /// `(Cᵢ + λI)⁻¹`
    resolvents: Vec<Matrix>,
    /// `λ (Cᵢ + λI)⁻¹ Cᵢ`, the per-task hypergradient weights.
    weights: Vec<Matrix>,
    theta_star: Vector,
    mu_g: f64,
}

impl MamlQuadratic {
    pub fn new(cs: Vec<Matrix>, mus: Vec<Vector>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Argument(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        if cs.is_empty() || cs.len() != mus.len() {
            return Err(Error::Argument("need one (C, μ) pair per task".into()));
        }
        let p = mus[0].len();
        if p == 0 {
            return Err(Error::Argument(
                "parameter dimension must be positive".into(),
            ));
        }
        for (c, mu) in cs.iter().zip(&mus) {
            require_spd(c, "task curvature C")?;
            if c.nrows() != p || mu.len() != p {
                return Err(Error::Argument(
                    "task blocks have inconsistent sizes".into(),
                ));
            }
        }
        let eye = Matrix::identity(p, p);
        let mut resolvents = Vec::with_capacity(cs.len());
        let mut weights = Vec::with_capacity(cs.len());
        let mut lhs = Matrix::zeros(p, p);
        let mut rhs = Vector::zeros(p);
        let mut mu_g = f64::INFINITY;
        for (c, mu) in cs.iter().zip(&mus) {
            let k = linalg::lu_solve_matrix(&(c + &eye * lambda), &eye)?;
            let m = linalg::symmetrize(&(&k * c * &k));
            lhs += &m;
            rhs += &m * mu;
            weights.push(&k * c * lambda);
            resolvents.push(k);
            mu_g = mu_g.min(linalg::min_sym_eigenvalue(c) + lambda);
        }
        // ∇Φ(θ) = λ² Σ Kᵢ Cᵢ Kᵢ (θ − μᵢ)
        let (theta_star, _) = linalg::spd_solve(&lhs, &rhs)?;
        Ok(Self {
            p,
            cs,
            mus,
            lambda,
            resolvents,
            weights,
            theta_star,
            mu_g,
        })
    }

    pub fn tasks(&self) -> usize {
        self.cs.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `Φ(θ)` from `θᵢ*(θ) − μᵢ = λ (Cᵢ + λI)⁻¹ (θ − μᵢ)`.
    pub fn phi_closed_form(&self, theta: &Vector) -> f64 {
        self.cs
            .iter()
            .zip(&self.mus)
            .zip(&self.resolvents)
            .map(|((c, mu), k)| {
                let e = k * (theta - mu) * self.lambda;
                0.5 * e.dot(&(c * &e))
            })
            .sum()
    }

    fn block<'a>(&self, y: &'a Vector, i: usize) -> nalgebra::DVectorView<'a, f64> {
        y.rows(i * self.p, self.p)
    }
}

/// Seeded instance: `Cᵢ` SPD with eigenvalues in `[0.5, 2]`, `μᵢ` entries
/// uniform in `[−1, 1]`.
pub fn make_maml(tasks: usize, p: usize, seed: u64, lambda: f64) -> Result<MamlQuadratic> {
    if tasks == 0 || p == 0 {
        return Err(Error::Argument("MAML needs N ≥ 1 and p ≥ 1".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Argument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut cs = Vec::with_capacity(tasks);
    let mut mus = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        cs.push(random_spd(&mut rng, p, 0.5, 2.0));
        mus.push(DVector::from_fn(p, |_, _| unit.sample(&mut rng)));
    }
    MamlQuadratic::new(cs, mus, lambda)
}

impl BilevelProblem for MamlQuadratic {
    fn name(&self) -> &str {
        "maml"
    }

    fn d1(&self) -> usize {
        self.p
    }

    fn d2(&self) -> usize {
        self.p * self.cs.len()
    }

    fn f(&self, _x: &Vector, y: &Vector) -> f64 {
        (0..self.tasks())
            .map(|i| {
                let e = self.block(y, i) - &self.mus[i];
                0.5 * e.dot(&(&self.cs[i] * &e))
            })
            .sum()
    }

    fn grad_x_f(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(self.p)
    }

    fn grad_y_f(&self, _x: &Vector, y: &Vector) -> Vector {
        let mut out = Vector::zeros(self.d2());
        for i in 0..self.tasks() {
            let gi = &self.cs[i] * (self.block(y, i) - &self.mus[i]);
            out.rows_mut(i * self.p, self.p).copy_from(&gi);
        }
        out
    }

    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        self.f(x, y)
            + (0..self.tasks())
                .map(|i| 0.5 * self.lambda * (self.block(y, i) - x).norm_squared())
                .sum::<f64>()
    }

    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        let mut out = self.grad_y_f(x, y);
        for i in 0..self.tasks() {
            let reg = (self.block(y, i) - x) * self.lambda;
            let mut rows = out.rows_mut(i * self.p, self.p);
            rows += reg;
        }
        out
    }

    fn hess_yy_g(&self, _x: &Vector, _y: &Vector) -> Matrix {
        let mut h = Matrix::zeros(self.d2(), self.d2());
        let eye = Matrix::identity(self.p, self.p);
        for (i, c) in self.cs.iter().enumerate() {
            let o = i * self.p;
            h.view_mut((o, o), (self.p, self.p))
                .copy_from(&(c + &eye * self.lambda));
        }
        h
    }

    fn hess_xy_g(&self, _x: &Vector, _y: &Vector) -> Matrix {
        let mut h = Matrix::zeros(self.p, self.d2());
        for i in 0..self.tasks() {
            for k in 0..self.p {
                h[(k, i * self.p + k)] = -self.lambda;
            }
        }
        h
    }

    fn mu_g(&self) -> f64 {
        self.mu_g
    }

    fn known_optimum(&self) -> Option<(Vector, Vector)> {
        let y = self.inner_solution(&self.theta_star)?;
        Some((self.theta_star.clone(), y))
    }

    fn inner_solution(&self, x: &Vector) -> Option<Vector> {
        let mut y = Vector::zeros(self.d2());
        for i in 0..self.tasks() {
            let yi = &self.resolvents[i] * (&self.cs[i] * &self.mus[i] + x * self.lambda);
            y.rows_mut(i * self.p, self.p).copy_from(&yi);
        }
        Some(y)
    }

    fn hypergrad_jac_x(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(Matrix::zeros(self.p, self.p))
    }

    fn hypergrad_jac_y(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        let mut j = Matrix::zeros(self.p, self.d2());
        for (i, w) in self.weights.iter().enumerate() {
            j.view_mut((0, i * self.p), (self.p, self.p)).copy_from(w);
        }
        Some(j)
    }

    fn gradient_field(&self, x: &[f64], y: &[f64], hx: &mut [f64], gy: &mut [f64]) -> Result<()> {
        let p = self.p;
        hx.iter_mut().for_each(|h| *h = 0.0);
        let mut scratch = [0.0f64; 16];
        let mut heap;
        let buf: &mut [f64] = if p <= scratch.len() / 2 {
            &mut scratch[..2 * p]
        } else {
            heap = vec![0.0; 2 * p];
            &mut heap
        };
        let (err, prod) = buf.split_at_mut(p);
        for i in 0..self.tasks() {
            let yi = &y[i * p..(i + 1) * p];
            for ((e, &v), &m) in err.iter_mut().zip(yi).zip(self.mus[i].iter()) {
                *e = v - m;
            }
            // ∇̄_θ f = Σ λ (Cᵢ + λI)⁻¹ Cᵢ (θᵢ − μᵢ)
            matvec_into(&self.weights[i], err, prod);
            for (h, &v) in hx.iter_mut().zip(prod.iter()) {
                *h += v;
            }
            // ∇_{θᵢ} g = Cᵢ (θᵢ − μᵢ) + λ (θᵢ − θ)
            let gi = &mut gy[i * p..(i + 1) * p];
            matvec_into(&self.cs[i], err, gi);
            for ((g, &v), &t) in gi.iter_mut().zip(yi).zip(x) {
                *g += self.lambda * (v - t);
            }
        }
        Ok(())
    }
}
