use crate::problem_model::{BilevelProblem, Matrix, Vector};

/// Test fixture: wraps a problem and adds a constant offset to one
/// coordinate of `∇_x f`, leaving `f` itself untouched. Gradient audits
/// must catch it.
pub struct CorruptedGradient {
    inner: Box<dyn BilevelProblem>,
    coordinate: usize,
    offset: f64,
}

impl CorruptedGradient {
    pub fn new(inner: Box<dyn BilevelProblem>, coordinate: usize, offset: f64) -> Self {
        assert!(coordinate < inner.d1(), "corrupted coordinate out of range");
        Self {
            inner,
            coordinate,
            offset,
        }
    }
}

impl BilevelProblem for CorruptedGradient {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn d1(&self) -> usize {
        self.inner.d1()
    }
    fn d2(&self) -> usize {
        self.inner.d2()
    }
    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        self.inner.f(x, y)
    }
    fn grad_x_f(&self, x: &Vector, y: &Vector) -> Vector {
        let mut g = self.inner.grad_x_f(x, y);
        g[self.coordinate] += self.offset;
        g
    }
    fn grad_y_f(&self, x: &Vector, y: &Vector) -> Vector {
        self.inner.grad_y_f(x, y)
    }
    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        self.inner.g(x, y)
    }
    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        self.inner.grad_y_g(x, y)
    }
    fn hess_yy_g(&self, x: &Vector, y: &Vector) -> Matrix {
        self.inner.hess_yy_g(x, y)
    }
    fn hess_xy_g(&self, x: &Vector, y: &Vector) -> Matrix {
        self.inner.hess_xy_g(x, y)
    }
    fn mu_g(&self) -> f64 {
        self.inner.mu_g()
    }
    fn inner_solution(&self, x: &Vector) -> Option<Vector> {
        self.inner.inner_solution(x)
    }
}
