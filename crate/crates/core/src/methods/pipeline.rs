//! Whole-model quantization driven by a calibration set.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cgq::{token_multipliers, HessianSource};
use super::gptq::gptq_quantize;
use super::iaaq::{iaaq_loss, select_alpha};
use super::{rtn_quantize, WeightMethod};
use crate::dllm::{
    forward, layer_name, ActQuantizer, ForwardTrace, InputSite, Linear, ModelWeights,
    HEAD_INPUT_SITE,
};
use crate::error::{Error, Result};
use crate::harness::QuantConfig;
use crate::numerics::binio::{BinReader, BinWriter};
use crate::numerics::Matrix;
use crate::quant::{
    accumulate_gram, dequantize, read_quantized, write_quantized, Granularity, QuantSpec,
    QuantizedTensor, Scheme,
};
use crate::tmas::{CalibrationSet, SamplingStrategy};

pub const QMODEL_MAGIC: &[u8; 4] = b"DLQP";

/// How one weight matrix was quantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub name: String,
    pub input_site: String,
    pub method: WeightMethod,
    pub bits: u8,
    pub hessian: Option<HessianSource>,
}

/// Every choice made while quantizing, sufficient to reproduce the run
/// given the same checkpoint and calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub library_version: String,
    pub config: QuantConfig,
    pub config_fingerprint: String,
    pub calibration_strategy: Option<SamplingStrategy>,
    pub calibration_samples: usize,
    pub layers: Vec<LayerDecision>,
    /// Selected value-scale multiplier per attention layer.
    pub value_alpha: Vec<f64>,
    /// `(α, summed loss)` per attention layer when the search ran.
    pub alpha_losses: Vec<Vec<(f64, f64)>>,
}

/// Dequantized weights ready for fake-quantized execution, the integer
/// tensors they came from, and the runtime activation quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub weights: ModelWeights,
    pub tensors: BTreeMap<String, QuantizedTensor>,
    pub act: ActQuantizer,
    pub manifest: QuantManifest,
}

/// Activation site feeding a quantized weight, e.g. `layers.0.wq` →
/// `layers.0.attn_in`.
pub fn linear_input_site(name: &str) -> Option<String> {
    if name == "head" {
        return Some(HEAD_INPUT_SITE.to_string());
    }
    let rest = name.strip_prefix("layers.")?;
    let (layer, short) = rest.split_once('.')?;
    let l: usize = layer.parse().ok()?;
    let lin = Linear::ALL
        .into_iter()
        .find(|lin| lin.short_name() == short)?;
    Some(layer_name(l, lin.input_site().name()))
}

fn sites(trace: &ForwardTrace) -> Vec<(String, &Matrix)> {
    let mut out = Vec::new();
    for (l, lt) in trace.layers.iter().enumerate() {
        for s in InputSite::ALL {
            out.push((layer_name(l, s.name()), lt.site(s)));
        }
    }
    out.push((HEAD_INPUT_SITE.to_string(), &trace.head_input));
    out
}

#[derive(Default)]
struct CalibStats {
    hessians: BTreeMap<String, Matrix>,
    ranges: BTreeMap<String, (f64, f64)>,
    alpha_losses: Vec<Vec<f64>>,
}

fn collect_stats(
    weights: &ModelWeights,
    calib: &CalibrationSet,
    config: &QuantConfig,
) -> Result<CalibStats> {
    let want_h = config.weight_method.needs_calibration();
    let want_ranges = config.act_granularity == Granularity::PerTensor;
    let n_layers = weights.config.n_layers;
    let p_quant = ActQuantizer::per_token(config.act_bits, n_layers, true)?;
    let v_spec = QuantSpec::new(config.act_bits, Scheme::Asymmetric, Granularity::PerToken)?;
    let mut stats = CalibStats {
        alpha_losses: vec![vec![0.0; config.alpha_grid.len()]; n_layers],
        ..CalibStats::default()
    };
    for sample in &calib.samples {
        let state = &sample.state;
        let (_, trace) = forward(weights, &state.tokens, None, true)?;
        let trace = trace.expect("capture requested");
        let mult = match config.weight_method {
            WeightMethod::Cgq => Some(token_multipliers(state, &config.cgq)),
            _ => None,
        };
        for (site, x) in sites(&trace) {
            if x.rows() != state.masked.len() || x.rows() != state.confidence.len() {
                return Err(Error::invalid(
                    "calibration state misaligned with captured activations",
                ));
            }
            if want_h {
                let h = stats
                    .hessians
                    .entry(site.clone())
                    .or_insert_with(|| Matrix::zeros(x.cols(), x.cols()));
                accumulate_gram(h, x, mult.as_deref());
            }
            if want_ranges {
                let (lo, hi) = x
                    .data()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                        (a.min(v), b.max(v))
                    });
                let e = stats
                    .ranges
                    .entry(site)
                    .or_insert((f64::INFINITY, f64::NEG_INFINITY));
                *e = (e.0.min(lo), e.1.max(hi));
            }
        }
        if config.iaaq {
            for (l, lt) in trace.layers.iter().enumerate() {
                for (p, v) in lt.probs.iter().zip(&lt.values) {
                    let p_deq = p_quant.softmax_operand(p);
                    for (acc, &a) in stats.alpha_losses[l].iter_mut().zip(&config.alpha_grid) {
                        *acc += iaaq_loss(v, &p_deq, v_spec, a)?;
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Quantizes every linear weight with the configured method and derives
/// the activation quantizer. The calibration set is replayed through the
/// full-precision model; projections that share an input share a Hessian.
pub fn quantize_model(
    weights: &ModelWeights,
    calib: &CalibrationSet,
    config: &QuantConfig,
) -> Result<QuantizedModel> {
    config.validate()?;
    weights.validate()?;
    if config.needs_calibration() && calib.is_empty() {
        let why = if config.weight_method.needs_calibration() {
            format!("weight method {}", config.weight_method)
        } else if config.iaaq {
            "value-scale search".to_string()
        } else {
            "per-tensor activation ranges".to_string()
        };
        return Err(Error::MissingCalibration(why));
    }
    let stats = if config.needs_calibration() {
        collect_stats(weights, calib, config)?
    } else {
        CalibStats::default()
    };

    let spec = QuantSpec::weight(config.weight_bits)?;
    let mut out = weights.clone();
    let mut tensors = BTreeMap::new();
    let mut layers = Vec::new();
    for name in weights.linear_names() {
        let site = linear_input_site(&name).expect("linear names map to sites");
        let w = weights.get(&name).expect("linear name exists");
        let (q, hessian) = match config.weight_method {
            WeightMethod::Rtn => (rtn_quantize(w, spec), None),
            method => {
                let h = stats.hessians.get(&site).ok_or_else(|| {
                    Error::MissingCalibration(format!("no activations captured for {site}"))
                })?;
                let source = if method == WeightMethod::Cgq {
                    HessianSource::Cgq
                } else {
                    HessianSource::Plain
                };
                (gptq_quantize(w, h, spec, config.damp)?, Some(source))
            }
        };
        *out.get_mut(&name).expect("linear name exists") = dequantize(&q);
        layers.push(LayerDecision {
            name: name.clone(),
            input_site: site,
            method: config.weight_method,
            bits: config.weight_bits,
            hessian,
        });
        tensors.insert(name, q);
    }

    let n_layers = weights.config.n_layers;
    let mut value_alpha = vec![1.0; n_layers];
    let mut alpha_losses = Vec::new();
    if config.iaaq {
        for (l, sums) in stats.alpha_losses.iter().enumerate() {
            let pairs: Vec<(f64, f64)> = config
                .alpha_grid
                .iter()
                .copied()
                .zip(sums.iter().copied())
                .collect();
            value_alpha[l] = pairs[select_alpha(&pairs).expect("validated non-empty grid")].0;
            alpha_losses.push(pairs);
        }
    }

    let act = ActQuantizer {
        bits: Some(config.act_bits),
        granularity: config.act_granularity,
        static_ranges: stats.ranges,
        quantize_softmax_matmul: config.quantize_softmax_matmul,
        value_alpha: value_alpha.clone(),
    };
    let manifest = QuantManifest {
        library_version: crate::VERSION.to_string(),
        config: config.clone(),
        config_fingerprint: config.fingerprint(),
        calibration_strategy: (!calib.is_empty()).then_some(calib.strategy),
        calibration_samples: calib.len(),
        layers,
        value_alpha,
        alpha_losses,
    };
    Ok(QuantizedModel {
        weights: out,
        tensors,
        act,
        manifest,
    })
}

impl QuantizedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        self.write_to(&mut w)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        let m = Self::read_from(&mut r)?;
        if !r.at_eof()? {
            return Err(Error::Format("trailing bytes after quantized model".into()));
        }
        Ok(m)
    }

    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.bytes(QMODEL_MAGIC)?;
        self.weights.write_to(w)?;
        w.len(self.tensors.len())?;
        for (name, q) in &self.tensors {
            w.str(name)?;
            write_quantized(w, q)?;
        }
        w.str(&serde_json::to_string(&self.act)?)?;
        w.str(&serde_json::to_string(&self.manifest)?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        r.magic(QMODEL_MAGIC)?;
        let weights = ModelWeights::read_from(r)?;
        let n = r.len()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = r.str()?;
            let q = read_quantized(r)?;
            let stored = weights.get(&name).ok_or_else(|| {
                Error::Format(format!("quantized tensor {name:?} has no matching weight"))
            })?;
            if &dequantize(&q) != stored {
                return Err(Error::Format(format!(
                    "weight {name:?} disagrees with its quantized record"
                )));
            }
            tensors.insert(name, q);
        }
        let act: ActQuantizer = serde_json::from_str(&r.str()?)?;
        let manifest: QuantManifest = serde_json::from_str(&r.str()?)?;
        Ok(Self {
            weights,
            tensors,
            act,
            manifest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_mapping() {
        assert_eq!(
            linear_input_site("layers.3.wk").unwrap(),
            "layers.3.attn_in"
        );
        assert_eq!(
            linear_input_site("layers.0.w2").unwrap(),
            "layers.0.ffn_hidden"
        );
        assert_eq!(linear_input_site("head").unwrap(), "head_in");
        assert!(linear_input_site("layers.x.wq").is_none());
        assert!(linear_input_site("tok_emb").is_none());
    }
}
