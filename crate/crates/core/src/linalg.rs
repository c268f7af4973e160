//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// Pivot ratio below which a Cholesky factor is treated as numerically
/// indefinite even if nalgebra accepted it.
const PIVOT_RATIO_FLOOR: f64 = 1e-14;

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of the symmetric part of `a`.
pub fn max_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Relative asymmetry `‖A − Aᵀ‖_F / ‖A‖_F` (zero for the zero matrix).
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        0.0
    } else {
        (a - a.transpose()).norm() / norm
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with [`Error::Singular`] carrying the smallest eigenvalue when the
/// factorization breaks down or its pivots span more than 14 decades.
pub fn spd_cholesky(a: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let singular = || Error::Singular {
        min_eigenvalue: min_sym_eigenvalue(a),
    };
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or_else(singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| {
        (lo.min(d * d), hi.max(d * d))
    });
    if !(lo > 0.0) || lo < PIVOT_RATIO_FLOOR * hi {
        return Err(singular());
    }
    Ok(chol)
}

/// Solve `A v = b` for symmetric positive-definite `A` by Cholesky.
///
/// Returns the solution and the absolute residual `‖A v − b‖`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let chol = spd_cholesky(a)?;
    let v = chol.solve(b);
    let residual = (a * &v - b).norm();
    Ok((v, residual))
}

/// Solve `A X = B` for square, nonsingular `A` by partial-pivot LU.
pub fn lu_solve_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone().lu().solve(b).ok_or(Error::Singular {
        min_eigenvalue: 0.0,
    })
}

/// Lower-triangular `L` with `L Lᵀ = M` for a symmetric positive
/// semi-definite `M`.
///
/// Zero pivots (up to `tol · max diag`) are allowed and produce zero columns,
/// which is what a perfectly correlated pair of Gaussians needs. A pivot that
/// is clearly negative means `M` is indefinite.
pub fn psd_factor(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Argument("psd_factor needs a square matrix".into()));
    }
    let scale = m
        .diagonal()
        .iter()
        .fold(0.0f64, |a, &b| a.max(b.abs()))
        .max(1.0);
    let eps = tol * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -eps {
            return Err(Error::Config(format!(
                "covariance is not positive semi-definite (pivot {d:.3e} at index {j})"
            )));
        }
        if d <= eps {
            // Column is linearly dependent on the previous ones; the
            // remaining entries of this column must then vanish too.
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > eps.sqrt() * scale {
                    return Err(Error::Config(format!(
                        "covariance is not positive semi-definite (dependent column {j})"
                    )));
                }
            }
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    Ok(l)
}

/// Largest real part over the eigenvalues of a square matrix.
pub fn max_real_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Argument("eigenvalues need a square matrix".into()));
    }
    if m.nrows() == 0 {
        return Err(Error::Argument("empty matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let schur = Schur::try_new(m.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Serde adapter writing a matrix as row-major nested arrays.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("matrix rows have unequal lengths".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }
}
