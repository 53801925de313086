//! Calibrated quantization methods: round-to-nearest, Hessian-compensated
//! column-wise weight quantization, its certainty-weighted Hessian variant,
//! and the attention-weighted value-scale search.

mod cgq;
mod gptq;
mod iaaq;
mod pipeline;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::{quantize, QuantSpec, QuantizedTensor};

pub use cgq::{
    cgq_hessian, cgq_quantize, plain_hessian, token_multipliers, weighted_output_error, CgqWeights,
    HessianSource, WeightedHessian,
};
pub use gptq::{gptq_quantize, hessian_proxy_loss, DEFAULT_DAMP};
pub use iaaq::{iaaq_loss, iaaq_scale_search, select_alpha, ScaleSearchResult, DEFAULT_ALPHA_GRID};
pub use pipeline::{
    linear_input_site, quantize_model, LayerDecision, QuantManifest, QuantizedModel, QMODEL_MAGIC,
};

/// Weight quantization method registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMethod {
    Rtn,
    Gptq,
    Cgq,
}

impl WeightMethod {
    pub const ALL: [WeightMethod; 3] = [WeightMethod::Rtn, WeightMethod::Gptq, WeightMethod::Cgq];

    pub fn name(self) -> &'static str {
        match self {
            WeightMethod::Rtn => "rtn",
            WeightMethod::Gptq => "gptq",
            WeightMethod::Cgq => "cgq",
        }
    }

    pub fn needs_calibration(self) -> bool {
        self != WeightMethod::Rtn
    }
}

impl fmt::Display for WeightMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown weight method {s:?} (expected rtn, gptq or cgq)"
                ))
            })
    }
}

/// Plain round-to-nearest: no calibration, no compensation.
pub fn rtn_quantize(w: &Matrix, spec: QuantSpec) -> QuantizedTensor {
    quantize(w, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_weight;

    #[test]
    fn registry_names() {
        for m in WeightMethod::ALL {
            assert_eq!(m.name().parse::<WeightMethod>().unwrap(), m);
        }
        assert!("awq".parse::<WeightMethod>().is_err());
        assert!(!WeightMethod::Rtn.needs_calibration());
    }

    #[test]
    fn rtn_delegates() {
        let w = Matrix::from_rows(&[vec![0.3, -1.2, 0.05], vec![2.0, 0.0, -0.7]]).unwrap();
        let spec = QuantSpec::weight(4).unwrap();
        assert_eq!(rtn_quantize(&w, spec), quantize_weight(&w, 4).unwrap());
    }
}
