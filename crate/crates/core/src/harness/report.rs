//! Machine-readable experiment reports.
//!
//! JSON reports carry the library version, the config fingerprint and the
//! seeds next to the results. CSV column orders are fixed per result kind:
//!
//! | kind        | columns |
//! |-------------|---------|
//! | step-error  | `seed,mode,step,block,mse,cumulative` |
//! | ablation    | `cell,seed,tmas,cgq,iaaq,variant,mean_mse,final_cumulative_mse,agreement` |
//! | ranges      | `step,layer,site,min,max,mean,std` |

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ablation::AblationRow;
use super::error::StepErrorReport;
use super::stats::{write_range_csv, RangeRow};
use super::QuantConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Config(format!(
                "unknown report format {s:?} (csv or json)"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rows", rename_all = "kebab-case")]
pub enum ReportBody {
    StepError(Vec<StepErrorReport>),
    Ablation(Vec<AblationRow>),
    Ranges(Vec<RangeRow>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub library_version: String,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub results: ReportBody,
}

impl Report {
    pub fn new(config: &QuantConfig, results: ReportBody) -> Self {
        Self {
            library_version: crate::VERSION.to_string(),
            config_fingerprint: config.fingerprint(),
            seeds: config.seeds.clone(),
            results,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        match &self.results {
            ReportBody::Ranges(rows) => write_range_csv(out, rows),
            ReportBody::StepError(reports) => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(["seed", "mode", "step", "block", "mse", "cumulative"])?;
                for rep in reports {
                    for r in &rep.rows {
                        w.serialize((
                            rep.seed,
                            rep.mode.name(),
                            r.step,
                            r.block,
                            r.mse,
                            r.cumulative,
                        ))?;
                    }
                }
                w.flush()?;
                Ok(())
            }
            ReportBody::Ablation(rows) => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record([
                    "cell",
                    "seed",
                    "tmas",
                    "cgq",
                    "iaaq",
                    "variant",
                    "mean_mse",
                    "final_cumulative_mse",
                    "agreement",
                ])?;
                for r in rows {
                    let variant = serde_json::to_value(r.variant)?;
                    w.serialize((
                        &r.cell,
                        r.seed,
                        r.tmas,
                        r.cgq,
                        r.iaaq,
                        variant.as_str().unwrap_or_default(),
                        r.mean_mse,
                        r.final_cumulative_mse,
                        r.agreement,
                    ))?;
                }
                w.flush()?;
                Ok(())
            }
        }
    }
}

/// Writes `report` to `path` in the requested format.
pub fn emit_report(report: &Report, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    match format {
        ReportFormat::Json => fs::write(path, report.to_json()?)?,
        ReportFormat::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            fs::write(path, buf)?;
        }
    }
    Ok(())
}
