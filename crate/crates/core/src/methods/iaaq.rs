//! Attention-weighted scale search for the value matrix.
//!
//! Rather than minimising the quantization error of `V` itself, each
//! candidate scale multiplier `α` is scored by the error it causes in the
//! attention output: `L(α) = ‖P · (Deq(Q(V; α·ŝ)) − V)‖²_F`, where `ŝ` is
//! the min-max scale of each row of `V` and `P` is the (already quantized)
//! softmax output.

use serde::{Deserialize, Serialize};

use crate::dllm::quantize_scaled;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::{dequantize, QuantSpec};

pub const DEFAULT_ALPHA_GRID: [f64; 2] = [1.0, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearchResult {
    pub alpha: f64,
    /// Row scales `α·ŝ` of the winning candidate.
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    /// `(α, L(α))` for every grid entry, in grid order.
    pub losses: Vec<(f64, f64)>,
}

impl ScaleSearchResult {
    pub fn loss(&self) -> f64 {
        self.losses
            .iter()
            .find(|(a, _)| *a == self.alpha)
            .map_or(f64::NAN, |&(_, l)| l)
    }
}

fn check(v: &Matrix, p_deq: &Matrix) -> Result<()> {
    if p_deq.cols() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "iaaq",
            left: p_deq.shape(),
            right: v.shape(),
        });
    }
    Ok(())
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if let Some(a) = grid.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::invalid(format!(
            "alpha {a} must be positive and finite"
        )));
    }
    Ok(())
}

/// `‖p_deq · (Deq(Q(v; α·ŝ)) − v)‖²_F`; `spec` supplies bits and the
/// asymmetric scheme, rows of `v` are the quantization groups.
pub fn iaaq_loss(v: &Matrix, p_deq: &Matrix, spec: QuantSpec, alpha: f64) -> Result<f64> {
    check(v, p_deq)?;
    let err = dequantize(&quantize_scaled(v, spec, alpha)).sub(v)?;
    Ok(p_deq.matmul(&err)?.frobenius_norm_sq())
}

/// Index of the grid minimum; exact ties go to the α closest to 1, then to
/// the earlier grid entry.
pub fn select_alpha(losses: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(a, l)) in losses.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (ba, bl) = losses[b];
                if l < bl || (l == bl && (a - 1.0).abs() < (ba - 1.0).abs()) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub fn iaaq_scale_search(
    v: &Matrix,
    p_deq: &Matrix,
    spec: QuantSpec,
    grid: &[f64],
) -> Result<ScaleSearchResult> {
    validate_grid(grid)?;
    check(v, p_deq)?;
    let losses = grid
        .iter()
        .map(|&a| Ok((a, iaaq_loss(v, p_deq, spec, a)?)))
        .collect::<Result<Vec<_>>>()?;
    let best = select_alpha(&losses).expect("grid is non-empty");
    let alpha = losses[best].0;
    let q = quantize_scaled(v, spec, alpha);
    Ok(ScaleSearchResult {
        alpha,
        scales: q.scales,
        zero_points: q.zero_points,
        losses,
    })
}
