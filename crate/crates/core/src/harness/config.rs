//! Experiment configuration: bit widths, method toggles, seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::methods::{CgqWeights, WeightMethod, DEFAULT_ALPHA_GRID, DEFAULT_DAMP};
use crate::quant::Granularity;
use crate::tmas::{BINS, DEFAULT_BUDGET, DEFAULT_PROPORTIONS};

/// Environment variable overriding [`QuantConfig::seeds`] with a
/// comma-separated list.
pub const SEED_ENV: &str = "DLLMQ_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActMethod {
    /// Plain min/max ranges (static per tensor or recomputed per token).
    StaticMinmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub weight_method: WeightMethod,
    pub act_method: ActMethod,
    pub act_granularity: Granularity,
    /// Attention-weighted value-scale search.
    pub iaaq: bool,
    /// Stratified calibration sampling; uniform-random sampling otherwise.
    pub tmas: bool,
    /// Quantize both operands of the softmax·V product.
    pub quantize_softmax_matmul: bool,
    pub alpha_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub damp: f64,
    pub cgq: CgqWeights,
    pub calib_budget: usize,
    pub tmas_proportions: [f64; BINS],
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: 4,
            weight_method: WeightMethod::Rtn,
            act_method: ActMethod::StaticMinmax,
            act_granularity: Granularity::PerToken,
            iaaq: false,
            tmas: false,
            quantize_softmax_matmul: true,
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            seeds: vec![0],
            damp: DEFAULT_DAMP,
            cgq: CgqWeights::default(),
            calib_budget: DEFAULT_BUDGET,
            tmas_proportions: DEFAULT_PROPORTIONS,
        }
    }
}

impl QuantConfig {
    /// Every technique on: stratified calibration, certainty-weighted
    /// Hessians and the value-scale search.
    pub fn full() -> Self {
        Self {
            weight_method: WeightMethod::Cgq,
            iaaq: true,
            tmas: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("weight_bits", self.weight_bits),
            ("act_bits", self.act_bits),
        ] {
            if !(2..=8).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [2, 8], got {b}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.act_granularity == Granularity::PerChannel {
            return Err(Error::Config(
                "act_granularity must be per-token or per-tensor".into(),
            ));
        }
        if self.alpha_grid.is_empty()
            || self.alpha_grid.iter().any(|a| !(*a > 0.0 && a.is_finite()))
        {
            return Err(Error::Config(
                "alpha_grid must be a non-empty list of positive numbers".into(),
            ));
        }
        if !(self.damp >= 0.0 && self.damp.is_finite()) {
            return Err(Error::Config(format!(
                "damp must be finite and non-negative, got {}",
                self.damp
            )));
        }
        if self.calib_budget == 0 {
            return Err(Error::Config("calib_budget must be positive".into()));
        }
        if self
            .tmas_proportions
            .iter()
            .any(|p| !(*p >= 0.0 && p.is_finite()))
        {
            return Err(Error::Config(
                "tmas_proportions must be non-negative".into(),
            ));
        }
        self.cgq.validate()
    }

    /// Whether quantization needs a calibration set at all.
    pub fn needs_calibration(&self) -> bool {
        self.weight_method.needs_calibration()
            || self.iaaq
            || self.act_granularity == Granularity::PerTensor
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file and applies the seed environment override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        cfg.apply_seed_env()?;
        Ok(cfg)
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seeds = parse_seeds(&v)?;
        }
        self.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed {s:?} in {SEED_ENV}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::Config(format!("{SEED_ENV} holds no seeds")));
    }
    Ok(seeds)
}
