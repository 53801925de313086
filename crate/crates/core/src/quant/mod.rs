//! Uniform fake-quantizers, dequantization, the layer quantization-loss
//! metric and Gram accumulation.
//!
//! Orientation used everywhere: weights are `out × in`, activations are
//! `tokens × in`, and a linear layer computes `X · Wᵀ` (`tokens × out`).
//! Rounding is half-away-from-zero (`f64::round`).

mod io;

pub use io::{read_quantized, write_quantized, QUANT_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Scale floor for all-zero or constant groups.
pub const SCALE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    /// One group per weight row (output channel).
    PerChannel,
    /// One group per activation row (token).
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub scheme: Scheme,
    pub granularity: Granularity,
}

impl QuantSpec {
    /// Widest supported code width. The experiment configs restrict
    /// themselves to 2..=8; wider codes exist for near-lossless controls.
    pub const MAX_BITS: u8 = 16;

    pub fn new(bits: u8, scheme: Scheme, granularity: Granularity) -> Result<Self> {
        if !(2..=Self::MAX_BITS).contains(&bits) {
            return Err(Error::invalid(format!(
                "bits must be in 2..={}, got {bits}",
                Self::MAX_BITS
            )));
        }
        Ok(Self {
            bits,
            scheme,
            granularity,
        })
    }

    /// Per-channel symmetric, the weight format.
    pub fn weight(bits: u8) -> Result<Self> {
        Self::new(bits, Scheme::Symmetric, Granularity::PerChannel)
    }

    /// Per-token asymmetric, the activation format.
    pub fn activation(bits: u8) -> Result<Self> {
        Self::new(bits, Scheme::Asymmetric, Granularity::PerToken)
    }

    pub fn q_min(&self) -> i32 {
        match self.scheme {
            Scheme::Symmetric => -((1 << (self.bits - 1)) - 1),
            Scheme::Asymmetric => 0,
        }
    }

    pub fn q_max(&self) -> i32 {
        match self.scheme {
            Scheme::Symmetric => (1 << (self.bits - 1)) - 1,
            Scheme::Asymmetric => (1 << self.bits) - 1,
        }
    }

    fn groups(&self, rows: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel | Granularity::PerToken => rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    pub spec: QuantSpec,
    pub rows: usize,
    pub cols: usize,
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Group index owning row `r`.
    pub fn group_of(&self, r: usize) -> usize {
        match self.spec.granularity {
            Granularity::PerTensor => 0,
            _ => r,
        }
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let groups = self.spec.groups(self.rows);
        if self.codes.len() != self.rows * self.cols {
            return Err(Error::Format("code count does not match shape".into()));
        }
        if self.scales.len() != groups || self.zero_points.len() != groups {
            return Err(Error::Format(
                "group count does not match granularity".into(),
            ));
        }
        let (lo, hi) = (self.spec.q_min(), self.spec.q_max());
        if self.codes.iter().any(|c| !(lo..=hi).contains(c)) {
            return Err(Error::Format("code outside the quantization range".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Format("scales must be finite and positive".into()));
        }
        if self.spec.scheme == Scheme::Symmetric && self.zero_points.iter().any(|&z| z != 0) {
            return Err(Error::Format(
                "symmetric tensor with non-zero zero point".into(),
            ));
        }
        Ok(())
    }
}

/// Group parameters `(scale, zero_point)` from a value range.
///
/// Asymmetric ranges are widened to include zero so that zero is exactly
/// representable and the zero point never needs clamping.
pub fn group_params(spec: &QuantSpec, min: f64, max: f64) -> (f64, i32) {
    match spec.scheme {
        Scheme::Symmetric => {
            let absmax = min.abs().max(max.abs());
            (absmax.max(SCALE_EPS) / spec.q_max() as f64, 0)
        }
        Scheme::Asymmetric => {
            let (lo, hi) = (min.min(0.0), max.max(0.0));
            let scale = (hi - lo).max(SCALE_EPS) / (spec.q_max() - spec.q_min()) as f64;
            (scale, asym_zero_point(spec, lo, scale))
        }
    }
}

/// `clamp(round(-min / scale))`, the asymmetric zero point for a given scale.
pub fn asym_zero_point(spec: &QuantSpec, min: f64, scale: f64) -> i32 {
    clamp_code(spec, (-min.min(0.0) / scale).round())
}

fn clamp_code(spec: &QuantSpec, v: f64) -> i32 {
    v.clamp(spec.q_min() as f64, spec.q_max() as f64) as i32
}

/// Code for one value given its group parameters.
pub fn encode(spec: &QuantSpec, x: f64, scale: f64, zero_point: i32) -> i32 {
    clamp_code(spec, (x / scale).round() + zero_point as f64)
}

fn row_range(row: &[f64]) -> (f64, f64) {
    row.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Quantizes with parameters supplied per group.
pub fn quantize_with_params(
    x: &Matrix,
    spec: QuantSpec,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
) -> Result<QuantizedTensor> {
    let groups = spec.groups(x.rows());
    if scales.len() != groups || zero_points.len() != groups {
        return Err(Error::invalid(format!(
            "expected {groups} scale/zero-point groups, got {}/{}",
            scales.len(),
            zero_points.len()
        )));
    }
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        let g = if groups == 1 { 0 } else { r };
        codes.extend(
            x.row(r)
                .iter()
                .map(|&v| encode(&spec, v, scales[g], zero_points[g])),
        );
    }
    let q = QuantizedTensor {
        codes,
        scales,
        zero_points,
        spec,
        rows: x.rows(),
        cols: x.cols(),
    };
    q.validate()?;
    Ok(q)
}

/// Quantizes any matrix under `spec`, deriving the group parameters from
/// the data.
pub fn quantize(x: &Matrix, spec: QuantSpec) -> QuantizedTensor {
    let ranges: Vec<(f64, f64)> = match spec.granularity {
        Granularity::PerTensor => {
            let r = row_range(x.data());
            vec![if x.data().is_empty() { (0.0, 0.0) } else { r }]
        }
        _ => (0..x.rows())
            .map(|r| {
                if x.cols() == 0 {
                    (0.0, 0.0)
                } else {
                    row_range(x.row(r))
                }
            })
            .collect(),
    };
    let (scales, zero_points) = ranges
        .iter()
        .map(|&(lo, hi)| group_params(&spec, lo, hi))
        .unzip();
    quantize_with_params(x, spec, scales, zero_points).expect("parameters derived for this shape")
}

/// Per-channel symmetric weight quantization:
/// `scale_r = max(|w_r|, ε) / q_max`, `codes = clamp(round(w / scale_r))`.
pub fn quantize_weight(w: &Matrix, bits: u8) -> Result<QuantizedTensor> {
    Ok(quantize(w, QuantSpec::weight(bits)?))
}

/// Asymmetric activation quantization, per token or per tensor.
pub fn quantize_activation(
    x: &Matrix,
    bits: u8,
    granularity: Granularity,
) -> Result<QuantizedTensor> {
    if granularity == Granularity::PerChannel {
        return Err(Error::invalid(
            "activations are quantized per token or per tensor",
        ));
    }
    Ok(quantize(
        x,
        QuantSpec::new(bits, Scheme::Asymmetric, granularity)?,
    ))
}

/// `(codes − zero_point) × scale`, broadcast per group.
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let mut out = Matrix::zeros(q.rows, q.cols);
    for r in 0..q.rows {
        let g = q.group_of(r);
        let (s, z) = (q.scales[g], q.zero_points[g]);
        let codes = &q.codes[r * q.cols..(r + 1) * q.cols];
        for (o, &c) in out.row_mut(r).iter_mut().zip(codes) {
            *o = (c - z) as f64 * s;
        }
    }
    out
}

/// Quantize-dequantize in one pass.
pub fn fake_quantize(x: &Matrix, spec: QuantSpec) -> Matrix {
    dequantize(&quantize(x, spec))
}

/// `‖X Wᵀ − Deq(X_q) Deq(W_q)ᵀ‖²_F` for weights `out × in` and activations
/// `tokens × in`.
pub fn quant_loss(
    w: &Matrix,
    x: &Matrix,
    wq: &QuantizedTensor,
    xq: &QuantizedTensor,
) -> Result<f64> {
    if wq.shape() != w.shape() || xq.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "quant_loss",
            left: wq.shape(),
            right: xq.shape(),
        });
    }
    let exact = x.matmul_t(w)?;
    let approx = dequantize(xq).matmul_t(&dequantize(wq))?;
    Ok(exact.sub(&approx)?.frobenius_norm_sq())
}

/// `Σ_tokens x_tᵀ x_t`, an `in × in` symmetric PSD matrix.
pub fn gram(x: &Matrix) -> Matrix {
    weighted_gram(x, None)
}

/// `Σ_t m_t² · x_tᵀ x_t`; `None` means every multiplier is 1.
pub(crate) fn weighted_gram(x: &Matrix, multipliers: Option<&[f64]>) -> Matrix {
    let n = x.cols();
    let mut h = Matrix::zeros(n, n);
    accumulate_gram(&mut h, x, multipliers);
    h
}

pub(crate) fn accumulate_gram(h: &mut Matrix, x: &Matrix, multipliers: Option<&[f64]>) {
    let n = x.cols();
    for t in 0..x.rows() {
        let w = multipliers.map_or(1.0, |m| m[t] * m[t]);
        if w == 0.0 {
            continue;
        }
        let row = x.row(t);
        for i in 0..n {
            let a = w * row[i];
            if a == 0.0 {
                continue;
            }
            for j in i..n {
                h[(i, j)] += a * row[j];
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            h[(j, i)] = h[(i, j)];
        }
    }
}
