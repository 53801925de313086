//! Toggle-grid ablation over stratified sampling, certainty-weighted
//! Hessians and the value-scale search.

use serde::{Deserialize, Serialize};

use super::error::{final_token_agreement, measure_step_error, ErrorMode};
use super::QuantConfig;
use crate::dllm::{DecodeSchedule, ModelWeights};
use crate::error::{Error, Result};
use crate::methods::{quantize_model, CgqWeights, QuantizedModel, WeightMethod};
use crate::numerics::Rng;
use crate::tmas::{tmas_sample, uniform_sample, CalibrationSet, TmasOptions};

/// Builds the calibration set the config asks for: stratified sampling
/// when `tmas` is on, otherwise a uniform draw of the same budget.
pub fn build_calibration(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
    config: &QuantConfig,
    seed: u64,
) -> Result<CalibrationSet> {
    if config.tmas {
        let opts = TmasOptions {
            budget: config.calib_budget,
            proportions: config.tmas_proportions,
        };
        tmas_sample(weights, prompts, schedule, &opts)
    } else {
        uniform_sample(
            weights,
            prompts,
            schedule,
            config.calib_budget,
            &mut Rng::new(seed).derive(1),
        )
    }
}

/// Calibrates (when needed) and quantizes in one go.
pub fn run_pipeline(
    weights: &ModelWeights,
    calib_prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
    config: &QuantConfig,
    seed: u64,
) -> Result<QuantizedModel> {
    let calib = if config.needs_calibration() {
        build_calibration(weights, calib_prompts, schedule, config, seed)?
    } else {
        CalibrationSet::empty(
            crate::tmas::SamplingStrategy::Tmas,
            schedule.steps,
            schedule.blocks,
            config.calib_budget,
            &config.tmas_proportions,
        )
    };
    quantize_model(weights, &calib, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CgqVariant {
    Full,
    MaskOnly,
    ScoreOnly,
}

impl CgqVariant {
    pub fn weights(self) -> CgqWeights {
        match self {
            CgqVariant::Full => CgqWeights::default(),
            CgqVariant::MaskOnly => CgqWeights::mask_only(),
            CgqVariant::ScoreOnly => CgqWeights::score_only(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub tmas: bool,
    pub cgq: bool,
    pub iaaq: bool,
    pub variant: CgqVariant,
}

/// The eight on/off combinations followed by the two partial-CGQ rows
/// (with sampling and the value-scale search on).
pub fn ablation_cells() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for bits in 0..8u8 {
        let (tmas, cgq, iaaq) = (bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
        let name = match (tmas, cgq, iaaq) {
            (false, false, false) => "baseline".to_string(),
            _ => [(tmas, "tmas"), (cgq, "cgq"), (iaaq, "iaaq")]
                .iter()
                .filter(|(on, _)| *on)
                .map(|(_, n)| *n)
                .collect::<Vec<_>>()
                .join("+"),
        };
        cells.push(AblationCell {
            name,
            tmas,
            cgq,
            iaaq,
            variant: CgqVariant::Full,
        });
    }
    for (name, variant) in [
        ("tmas+cgq[mask]+iaaq", CgqVariant::MaskOnly),
        ("tmas+cgq[score]+iaaq", CgqVariant::ScoreOnly),
    ] {
        cells.push(AblationCell {
            name: name.to_string(),
            tmas: true,
            cgq: true,
            iaaq: true,
            variant,
        });
    }
    cells
}

impl AblationCell {
    /// `base` with this cell's toggles applied. With CGQ off the base
    /// weight method is kept (falling back to RTN if the base itself is
    /// CGQ).
    pub fn config(&self, base: &QuantConfig) -> QuantConfig {
        let mut c = base.clone();
        c.tmas = self.tmas;
        c.iaaq = self.iaaq;
        if self.cgq {
            c.weight_method = WeightMethod::Cgq;
            c.cgq = self.variant.weights();
        } else if c.weight_method == WeightMethod::Cgq {
            c.weight_method = WeightMethod::Rtn;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub tmas: bool,
    pub cgq: bool,
    pub iaaq: bool,
    pub variant: CgqVariant,
    pub mean_mse: f64,
    pub final_cumulative_mse: f64,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub mean_mse: f64,
    pub mean_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<CellSummary>,
}

impl AblationTable {
    pub fn rows_for(&self, cell: &str) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.cell == cell).collect()
    }
}

/// Inputs shared by every cell.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub fp: &'a ModelWeights,
    /// Prompts are split per seed into calibration and evaluation sets.
    pub prompt_pool: &'a [Vec<u32>],
    pub calib_prompts: usize,
    pub eval_prompts: usize,
    pub schedule: DecodeSchedule,
    /// Mode for the per-step MSE; agreement always uses free decoding.
    pub mode: ErrorMode,
}

/// Calibration prompts and evaluation prompts.
pub type PromptSplit = (Vec<Vec<u32>>, Vec<Vec<u32>>);

/// Deterministic per-seed split of the pool into calibration and
/// evaluation prompts.
pub fn split_prompts(
    pool: &[Vec<u32>],
    calib: usize,
    eval: usize,
    seed: u64,
) -> Result<PromptSplit> {
    if calib + eval > pool.len() {
        return Err(Error::invalid(format!(
            "need {} prompts for the split, pool has {}",
            calib + eval,
            pool.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    Rng::new(seed).derive(7).shuffle(&mut idx);
    let pick = |r: &[usize]| r.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
    Ok((pick(&idx[..calib]), pick(&idx[calib..calib + eval])))
}

/// Evaluates one config on one seed: mean per-step MSE, final cumulative
/// MSE and final-token agreement.
pub fn evaluate_config(
    setup: &AblationSetup<'_>,
    config: &QuantConfig,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let (calib, eval) = split_prompts(
        setup.prompt_pool,
        setup.calib_prompts,
        setup.eval_prompts,
        seed,
    )?;
    let q = run_pipeline(setup.fp, &calib, setup.schedule, config, seed)?;
    let rep = measure_step_error(
        setup.fp,
        &q.weights,
        Some(&q.act),
        &eval,
        setup.schedule,
        setup.mode,
    )?;
    let agreement = match rep.agreement {
        Some(a) => a,
        None => final_token_agreement(setup.fp, &q.weights, Some(&q.act), &eval, setup.schedule)?,
    };
    Ok((rep.mean_mse(), rep.final_cumulative(), agreement))
}

pub fn run_ablation(base: &QuantConfig, setup: &AblationSetup<'_>) -> Result<AblationTable> {
    base.validate()?;
    let cells = ablation_cells();
    let mut rows = Vec::new();
    for &seed in &base.seeds {
        for cell in &cells {
            let (mean_mse, final_cumulative_mse, agreement) =
                evaluate_config(setup, &cell.config(base), seed)?;
            rows.push(AblationRow {
                cell: cell.name.clone(),
                seed,
                tmas: cell.tmas,
                cgq: cell.cgq,
                iaaq: cell.iaaq,
                variant: cell.variant,
                mean_mse,
                final_cumulative_mse,
                agreement,
            });
        }
    }
    let summary = cells
        .iter()
        .map(|cell| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.cell == cell.name).collect();
            let n = rs.len().max(1) as f64;
            CellSummary {
                cell: cell.name.clone(),
                mean_mse: rs.iter().map(|r| r.mean_mse).sum::<f64>() / n,
                mean_agreement: rs.iter().map(|r| r.agreement).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(AblationTable { rows, summary })
}
