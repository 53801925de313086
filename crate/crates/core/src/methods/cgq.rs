//! Certainty-guided Hessians: every token's contribution to `XᵀX` is
//! weighted by its mask state and by the confidence the model assigned it.

use serde::{Deserialize, Serialize};

use super::gptq::gptq_quantize;
use crate::dllm::DecodeState;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::{accumulate_gram, QuantSpec, QuantizedTensor};

/// Per-token multiplier `m_i = indicator_i + √confidence_i`, where the
/// indicator is `masked_weight` for masked tokens and `unmasked_weight`
/// otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgqWeights {
    pub masked_weight: f64,
    pub unmasked_weight: f64,
    /// Include the `√confidence` term.
    pub use_confidence: bool,
}

impl Default for CgqWeights {
    fn default() -> Self {
        Self {
            masked_weight: 1.0,
            unmasked_weight: 0.7,
            use_confidence: true,
        }
    }
}

impl CgqWeights {
    /// Mask-state term only (confidence treated as zero).
    pub fn mask_only() -> Self {
        Self {
            use_confidence: false,
            ..Self::default()
        }
    }

    /// Confidence term only (indicator 1.0 for every token).
    pub fn score_only() -> Self {
        Self {
            masked_weight: 1.0,
            unmasked_weight: 1.0,
            use_confidence: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("masked_weight", self.masked_weight),
            ("unmasked_weight", self.unmasked_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianSource {
    Plain,
    Cgq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedHessian {
    pub h: Matrix,
    pub token_weights: Vec<f64>,
    pub source: HessianSource,
}

pub fn token_multipliers(state: &DecodeState, weights: &CgqWeights) -> Vec<f64> {
    state
        .masked
        .iter()
        .zip(&state.confidence)
        .map(|(&m, &c)| {
            let indicator = if m {
                weights.masked_weight
            } else {
                weights.unmasked_weight
            };
            indicator
                + if weights.use_confidence {
                    c.max(0.0).sqrt()
                } else {
                    0.0
                }
        })
        .collect()
}

/// `Σ_i m_i² x_iᵀ x_i` over the rows of `x` (one per sequence position).
pub fn cgq_hessian(
    x: &Matrix,
    state: &DecodeState,
    weights: &CgqWeights,
) -> Result<WeightedHessian> {
    if x.rows() != state.tokens.len()
        || state.masked.len() != x.rows()
        || state.confidence.len() != x.rows()
    {
        return Err(Error::invalid(format!(
            "activation has {} rows but the decode state has {} positions",
            x.rows(),
            state.tokens.len()
        )));
    }
    let m = token_multipliers(state, weights);
    let mut h = Matrix::zeros(x.cols(), x.cols());
    accumulate_gram(&mut h, x, Some(&m));
    Ok(WeightedHessian {
        h,
        token_weights: m,
        source: HessianSource::Cgq,
    })
}

/// Unweighted Gram matrix wrapped in the same type.
pub fn plain_hessian(x: &Matrix) -> WeightedHessian {
    let mut h = Matrix::zeros(x.cols(), x.cols());
    accumulate_gram(&mut h, x, None);
    WeightedHessian {
        h,
        token_weights: vec![1.0; x.rows()],
        source: HessianSource::Plain,
    }
}

/// Column-wise compensated quantization under the certainty-weighted
/// Hessian of a single calibration activation.
pub fn cgq_quantize(
    w: &Matrix,
    x: &Matrix,
    state: &DecodeState,
    spec: QuantSpec,
    weights: &CgqWeights,
    damp: f64,
) -> Result<QuantizedTensor> {
    gptq_quantize(w, &cgq_hessian(x, state, weights)?.h, spec, damp)
}

/// `Σ_i m_i² ‖(W − Ŵ) x_i‖²`.
pub fn weighted_output_error(
    w: &Matrix,
    w_hat: &Matrix,
    x: &Matrix,
    multipliers: &[f64],
) -> Result<f64> {
    if multipliers.len() != x.rows() {
        return Err(Error::invalid("one multiplier per activation row required"));
    }
    let y = x.matmul_t(&w.sub(w_hat)?)?;
    Ok((0..y.rows())
        .map(|i| multipliers[i] * multipliers[i] * y.row(i).iter().map(|v| v * v).sum::<f64>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::gram;

    fn state(masked: Vec<bool>, confidence: Vec<f64>) -> DecodeState {
        let n = masked.len();
        DecodeState {
            tokens: masked.iter().map(|&m| if m { 15 } else { 2 }).collect(),
            masked,
            confidence,
            step: 0,
            block: 0,
            response_start: 0,
            response_len: n,
        }
    }

    fn x() -> Matrix {
        Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.25, -1.0]]).unwrap()
    }

    #[test]
    fn all_masked_no_confidence_is_gram() {
        let h = cgq_hessian(
            &x(),
            &state(vec![true; 3], vec![0.0; 3]),
            &CgqWeights::default(),
        )
        .unwrap();
        assert_eq!(h.h, gram(&x()));
    }

    #[test]
    fn all_unmasked_scales_by_049() {
        let h = cgq_hessian(
            &x(),
            &state(vec![false; 3], vec![0.0; 3]),
            &CgqWeights::default(),
        )
        .unwrap();
        let want = gram(&x()).scale(0.49);
        assert!(h.h.sub(&want).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn sub_ablation_multipliers() {
        let s = state(vec![true, false], vec![0.25, 0.64]);
        assert_eq!(
            token_multipliers(&s, &CgqWeights::default()),
            vec![1.5, 1.5]
        );
        assert_eq!(
            token_multipliers(&s, &CgqWeights::mask_only()),
            vec![1.0, 0.7]
        );
        assert_eq!(
            token_multipliers(&s, &CgqWeights::score_only()),
            vec![1.5, 1.8]
        );
    }

    #[test]
    fn misaligned_state_rejected() {
        assert!(cgq_hessian(
            &x(),
            &state(vec![true; 2], vec![0.0; 2]),
            &CgqWeights::default()
        )
        .is_err());
    }
}
