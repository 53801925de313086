//! Per-step quantization error of the logits along a decoding trajectory.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dllm::{
    decode_with_logits, forward, ActQuantizer, DecodeSchedule, DecodeSession, ModelWeights,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMode {
    /// Both models see the full-precision trajectory; isolates the error
    /// made at each step.
    TeacherForced,
    /// Each model decodes on its own; includes propagated error.
    FreeRunning,
}

impl ErrorMode {
    pub fn name(self) -> &'static str {
        match self {
            ErrorMode::TeacherForced => "teacher-forced",
            ErrorMode::FreeRunning => "free-running",
        }
    }
}

impl fmt::Display for ErrorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher-forced" => Ok(ErrorMode::TeacherForced),
            "free-running" => Ok(ErrorMode::FreeRunning),
            _ => Err(Error::Config(format!(
                "unknown error mode {s:?} (teacher-forced or free-running)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepErrorRow {
    pub step: usize,
    pub block: usize,
    /// Logits MSE over response positions, averaged over prompts.
    pub mse: f64,
    /// Running sum of `mse` up to and including this step.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepErrorReport {
    pub mode: ErrorMode,
    pub seed: u64,
    pub config_fingerprint: String,
    pub rows: Vec<StepErrorRow>,
    /// Fraction of response tokens where the quantized model's final
    /// output equals the full-precision one (free-running only).
    pub agreement: Option<f64>,
}

impl StepErrorReport {
    pub fn final_cumulative(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative)
    }

    pub fn mean_mse(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.rows.iter().map(|r| r.mse).sum::<f64>() / self.rows.len() as f64
        }
    }

    pub fn with_meta(mut self, fingerprint: impl Into<String>, seed: u64) -> Self {
        self.config_fingerprint = fingerprint.into();
        self.seed = seed;
        self
    }
}

fn response_mse(a: &Matrix, b: &Matrix, start: usize, len: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for r in start..start + len {
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            s += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Logits MSE between a full-precision model and a quantized one (weights
/// plus optional activation quantizer) at every decoding step.
pub fn measure_step_error(
    fp: &ModelWeights,
    q: &ModelWeights,
    act: Option<&ActQuantizer>,
    prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
    mode: ErrorMode,
) -> Result<StepErrorReport> {
    if fp.config != q.config {
        return Err(Error::Config(
            "full-precision and quantized models differ in config".into(),
        ));
    }
    let mut sums = vec![0.0; schedule.steps];
    let mut blocks = vec![0; schedule.steps];
    let mut agree = 0usize;
    let mut total = 0usize;
    for prompt in prompts {
        let start = prompt.len();
        match mode {
            ErrorMode::TeacherForced => {
                let (_, records) = decode_with_logits(fp, prompt, schedule, None)?;
                if records.len() != schedule.steps {
                    return Err(Error::invalid("trace length differs from the schedule"));
                }
                for (t, rec) in records.iter().enumerate() {
                    let (ql, _) = forward(q, &rec.state.tokens, act, false)?;
                    sums[t] += response_mse(&rec.logits, &ql, start, schedule.gen_len);
                    blocks[t] = rec.state.block;
                }
            }
            ErrorMode::FreeRunning => {
                let mut a = DecodeSession::new(fp, prompt, schedule, None)?;
                let mut b = DecodeSession::new(q, prompt, schedule, act)?;
                for t in 0..schedule.steps {
                    let (ra, rb) = match (a.step()?, b.step()?) {
                        (Some(ra), Some(rb)) => (ra, rb),
                        _ => return Err(Error::invalid("trace length differs from the schedule")),
                    };
                    if ra.state.step != rb.state.step || ra.state.block != rb.state.block {
                        return Err(Error::invalid("decode traces are misaligned"));
                    }
                    sums[t] += response_mse(&ra.logits, &rb.logits, start, schedule.gen_len);
                    blocks[t] = ra.state.block;
                }
                let resp = start..start + schedule.gen_len;
                agree += a.tokens()[resp.clone()]
                    .iter()
                    .zip(&b.tokens()[resp])
                    .filter(|(x, y)| x == y)
                    .count();
                total += schedule.gen_len;
            }
        }
    }
    let n = prompts.len().max(1) as f64;
    let mut cumulative = 0.0;
    let rows = sums
        .iter()
        .zip(&blocks)
        .enumerate()
        .map(|(step, (&s, &block))| {
            let mse = s / n;
            cumulative += mse;
            StepErrorRow {
                step,
                block,
                mse,
                cumulative,
            }
        })
        .collect();
    Ok(StepErrorReport {
        mode,
        seed: 0,
        config_fingerprint: String::new(),
        rows,
        agreement: (mode == ErrorMode::FreeRunning).then(|| {
            if total == 0 {
                1.0
            } else {
                agree as f64 / total as f64
            }
        }),
    })
}

/// Fraction of response tokens on which two decoders agree after decoding.
pub fn final_token_agreement(
    fp: &ModelWeights,
    q: &ModelWeights,
    act: Option<&ActQuantizer>,
    prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
) -> Result<f64> {
    let mut agree = 0usize;
    let mut total = 0usize;
    for prompt in prompts {
        let (a, _) = crate::dllm::decode(fp, prompt, schedule, None)?;
        let (b, _) = crate::dllm::decode(q, prompt, schedule, act)?;
        let resp = prompt.len()..prompt.len() + schedule.gen_len;
        agree += a[resp.clone()]
            .iter()
            .zip(&b[resp])
            .filter(|(x, y)| x == y)
            .count();
        total += schedule.gen_len;
    }
    Ok(if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    })
}
