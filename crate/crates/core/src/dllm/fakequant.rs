//! Runtime fake-quantization of activations.
//!
//! Weights are quantized ahead of time (the model simply carries
//! dequantized matrices); this type handles everything computed on the
//! fly: the inputs of every linear projection and both operands of the
//! softmax·V product.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::{
    self, asym_zero_point, dequantize, group_params, Granularity, QuantSpec, Scheme,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActQuantizer {
    /// Activation code width; `None` leaves activations in full precision.
    pub bits: Option<u8>,
    /// `PerToken` recomputes ranges at runtime, `PerTensor` uses the static
    /// calibrated ranges in `static_ranges`.
    pub granularity: Granularity,
    pub static_ranges: BTreeMap<String, (f64, f64)>,
    /// Quantize the softmax output P and the value matrix V before `P·V`.
    pub quantize_softmax_matmul: bool,
    /// Per-layer multiplier applied to the value-matrix scale.
    pub value_alpha: Vec<f64>,
}

impl ActQuantizer {
    /// Dynamic per-token activation quantization with `alpha = 1` everywhere.
    pub fn per_token(bits: u8, n_layers: usize, quantize_softmax_matmul: bool) -> Result<Self> {
        QuantSpec::activation(bits)?;
        Ok(Self {
            bits: Some(bits),
            granularity: Granularity::PerToken,
            static_ranges: BTreeMap::new(),
            quantize_softmax_matmul,
            value_alpha: vec![1.0; n_layers],
        })
    }

    /// Leaves every activation untouched.
    pub fn disabled(n_layers: usize) -> Self {
        Self {
            bits: None,
            granularity: Granularity::PerToken,
            static_ranges: BTreeMap::new(),
            quantize_softmax_matmul: false,
            value_alpha: vec![1.0; n_layers],
        }
    }

    fn spec(&self, granularity: Granularity) -> Option<QuantSpec> {
        self.bits.map(|b| QuantSpec {
            bits: b,
            scheme: Scheme::Asymmetric,
            granularity,
        })
    }

    /// Fake-quantizes the input of a linear projection at `site`.
    pub fn linear_input<'a>(&self, site: &str, x: &'a Matrix) -> Result<Cow<'a, Matrix>> {
        let Some(spec) = self.spec(self.granularity) else {
            return Ok(Cow::Borrowed(x));
        };
        match self.granularity {
            Granularity::PerToken => Ok(Cow::Owned(quant::fake_quantize(x, spec))),
            Granularity::PerTensor => {
                let &(lo, hi) = self.static_ranges.get(site).ok_or_else(|| {
                    Error::MissingCalibration(format!("no static range for site {site}"))
                })?;
                let (s, z) = group_params(&spec, lo, hi);
                let q = quant::quantize_with_params(x, spec, vec![s], vec![z])?;
                Ok(Cow::Owned(dequantize(&q)))
            }
            Granularity::PerChannel => Err(Error::invalid(
                "activations are never quantized per channel",
            )),
        }
    }

    /// Softmax output operand of `P·V`, per-token asymmetric.
    pub fn softmax_operand<'a>(&self, p: &'a Matrix) -> Cow<'a, Matrix> {
        match self.spec(Granularity::PerToken) {
            Some(spec) if self.quantize_softmax_matmul => Cow::Owned(quant::fake_quantize(p, spec)),
            _ => Cow::Borrowed(p),
        }
    }

    /// Value operand of `P·V`, per-token asymmetric with the layer's scale
    /// multiplier.
    pub fn value_operand<'a>(&self, layer: usize, v: &'a Matrix) -> Cow<'a, Matrix> {
        match self.spec(Granularity::PerToken) {
            Some(spec) if self.quantize_softmax_matmul => {
                let alpha = self.value_alpha.get(layer).copied().unwrap_or(1.0);
                Cow::Owned(fake_quantize_scaled(v, spec, alpha))
            }
            _ => Cow::Borrowed(v),
        }
    }
}

/// Per-row asymmetric fake-quantization with every row scale multiplied by
/// `alpha` and the zero point recomputed for the scaled step.
pub fn fake_quantize_scaled(v: &Matrix, spec: QuantSpec, alpha: f64) -> Matrix {
    dequantize(&quantize_scaled(v, spec, alpha))
}

pub(crate) fn quantize_scaled(v: &Matrix, spec: QuantSpec, alpha: f64) -> quant::QuantizedTensor {
    let mut scales = Vec::with_capacity(v.rows());
    let mut zps = Vec::with_capacity(v.rows());
    for r in 0..v.rows() {
        let row = v.row(r);
        let lo = row.iter().fold(0.0f64, |m, &x| m.min(x));
        let hi = row.iter().fold(0.0f64, |m, &x| m.max(x));
        let (base, _) = group_params(&spec, lo, hi);
        let s = alpha * base;
        scales.push(s);
        zps.push(asym_zero_point(&spec, lo, s));
    }
    let spec = QuantSpec {
        granularity: Granularity::PerToken,
        ..spec
    };
    quant::quantize_with_params(v, spec, scales, zps).expect("one group per row")
}
