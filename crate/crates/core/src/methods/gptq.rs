//! Column-wise weight quantization with inverse-Hessian error compensation.

use crate::error::{Error, Result};
use crate::numerics::{cholesky, cholesky_inverse, Matrix};
use crate::quant::{dequantize, encode, quantize, QuantSpec, QuantizedTensor};

/// Relative diagonal damping: `damp · mean(diag(h))` is added to `h`.
pub const DEFAULT_DAMP: f64 = 0.01;

/// Quantizes `w` (`out × in`) column by column, left to right. Scales come
/// from the original `w`; after column `i` is rounded, its error divided by
/// `U[i,i]` is propagated onto the remaining columns along row `i` of the
/// upper Cholesky factor `U` of the damped inverse Hessian.
///
/// Columns whose Hessian diagonal is zero (inputs that never fire) get a
/// unit diagonal so the factorisation stays defined. If the factorisation
/// fails, damping is raised tenfold once before giving up.
pub fn gptq_quantize(
    w: &Matrix,
    h: &Matrix,
    spec: QuantSpec,
    damp: f64,
) -> Result<QuantizedTensor> {
    let n = w.cols();
    if h.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "gptq_quantize",
            left: w.shape(),
            right: h.shape(),
        });
    }
    if !(damp >= 0.0 && damp.is_finite()) {
        return Err(Error::invalid(format!(
            "damp must be finite and non-negative, got {damp}"
        )));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("hessian"));
    }
    let base = quantize(w, spec);
    if n == 0 || w.rows() == 0 {
        return Ok(base);
    }

    let mut h = h.clone();
    for i in 0..n {
        if h[(i, i)] == 0.0 {
            h[(i, i)] = 1.0;
        }
    }
    let u = match upper_inverse_factor(&h, damp) {
        Ok(u) => u,
        Err(Error::NotPositiveDefinite { .. }) => upper_inverse_factor(&h, damp * 10.0)?,
        Err(e) => return Err(e),
    };

    let mut work = w.clone();
    let mut codes = base.codes.clone();
    for i in 0..n {
        let d = u[(i, i)];
        for r in 0..w.rows() {
            let g = base.group_of(r);
            let (s, z) = (base.scales[g], base.zero_points[g]);
            let x = work[(r, i)];
            let c = encode(&spec, x, s, z);
            codes[r * n + i] = c;
            let err = (x - (c - z) as f64 * s) / d;
            if err != 0.0 {
                let row = work.row_mut(r);
                for j in (i + 1)..n {
                    row[j] -= err * u[(i, j)];
                }
            }
        }
    }
    let q = QuantizedTensor { codes, ..base };
    q.validate()?;
    Ok(q)
}

/// Upper `U` with `Uᵀ U = (h + damp·mean(diag)·I)⁻¹`.
fn upper_inverse_factor(h: &Matrix, damp: f64) -> Result<Matrix> {
    let hinv = cholesky_inverse(h, damp)?;
    let l = cholesky(&hinv).map_err(|_| Error::NotPositiveDefinite { damp })?;
    Ok(l.transpose())
}

/// `tr(E h Eᵀ)` with `E = w − Deq(q)`: the layer-output error the Hessian
/// predicts.
pub fn hessian_proxy_loss(w: &Matrix, q: &QuantizedTensor, h: &Matrix) -> Result<f64> {
    let e = w.sub(&dequantize(q))?;
    Ok(e.matmul(h)?.hadamard(&e)?.sum())
}
