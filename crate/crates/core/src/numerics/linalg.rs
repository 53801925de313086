use super::Matrix;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;

/// Lower-triangular `L` with `a = L Lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d.is_nan() || d <= 0.0 || d.is_infinite() {
            return Err(Error::NotPositiveDefinite { damp: 0.0 });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn lower_inverse(l: &Matrix) -> Matrix {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for c in 0..n {
        inv[(c, c)] = 1.0 / l[(c, c)];
        for r in (c + 1)..n {
            let mut s = 0.0;
            for k in c..r {
                s -= l[(r, k)] * inv[(k, c)];
            }
            inv[(r, c)] = s / l[(r, r)];
        }
    }
    inv
}

/// Adds `damp · mean(diag(h)) · I` to `h`.
pub fn damped(h: &Matrix, damp: f64) -> Matrix {
    let n = h.rows();
    let mean_diag = if n == 0 {
        0.0
    } else {
        (0..n).map(|i| h[(i, i)]).sum::<f64>() / n as f64
    };
    let mut out = h.clone();
    for i in 0..n {
        out[(i, i)] += damp * mean_diag;
    }
    out
}

/// `(h + damp·mean(diag(h))·I)⁻¹` through a Cholesky factorisation.
///
/// The result is symmetrised exactly.
pub fn cholesky_inverse(h: &Matrix, damp: f64) -> Result<Matrix> {
    if h.rows() != h.cols() {
        return Err(Error::ShapeMismatch {
            op: "cholesky_inverse",
            left: h.shape(),
            right: h.shape(),
        });
    }
    if h.max_asymmetry() > SYMMETRY_TOL {
        return Err(Error::invalid(format!(
            "cholesky_inverse needs a symmetric matrix (asymmetry {:e})",
            h.max_asymmetry()
        )));
    }
    let l = cholesky(&damped(h, damp)).map_err(|_| Error::NotPositiveDefinite { damp })?;
    let l_inv = lower_inverse(&l);
    // (L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹
    let n = h.rows();
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += l_inv[(k, i)] * l_inv[(k, j)];
            }
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    if !inv.is_finite() {
        return Err(Error::NotPositiveDefinite { damp });
    }
    Ok(inv)
}
