//! Per-step activation range statistics along decoding.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dllm::{DecodeSchedule, DecodeSession, LayerTrace, ModelWeights};
use crate::error::Result;
use crate::numerics::Matrix;

/// Sites reported per layer, in output order.
pub const RANGE_SITES: [&str; 6] = [
    "attn_in",
    "softmax",
    "values",
    "attn_out",
    "ffn_in",
    "ffn_hidden",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    pub step: usize,
    pub layer: usize,
    pub site: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl RangeRow {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Running min/max/mean/variance (Welford), so constant inputs give an
/// exactly zero deviation.
#[derive(Debug, Clone, Copy)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Moments {
    fn new() -> Self {
        Self {
            n: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }

    fn push_all(&mut self, m: &Matrix) {
        for &x in m.data() {
            self.push(x);
        }
    }

    fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).max(0.0).sqrt()
        }
    }
}

fn site_matrices<'a>(lt: &'a LayerTrace, site: &str) -> Vec<&'a Matrix> {
    match site {
        "attn_in" => vec![&lt.attn_input],
        "softmax" => lt.probs.iter().collect(),
        "values" => lt.values.iter().collect(),
        "attn_out" => vec![&lt.attn_output],
        "ffn_in" => vec![&lt.ffn_input],
        "ffn_hidden" => vec![&lt.ffn_hidden],
        _ => unreachable!("unknown range site {site}"),
    }
}

/// Replays full-precision decoding of every prompt and summarises each
/// (step, layer, site) over all prompts, tokens and channels.
pub fn activation_range_stats(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
) -> Result<Vec<RangeRow>> {
    let mut acc: BTreeMap<(usize, usize, usize), Moments> = BTreeMap::new();
    for prompt in prompts {
        let mut session = DecodeSession::new(weights, prompt, schedule, None)?.with_capture(true);
        while let Some(rec) = session.step()? {
            let trace = rec.trace.expect("capture enabled");
            for (l, lt) in trace.layers.iter().enumerate() {
                for (si, site) in RANGE_SITES.iter().enumerate() {
                    let m = acc
                        .entry((rec.state.step, l, si))
                        .or_insert_with(Moments::new);
                    for x in site_matrices(lt, site) {
                        m.push_all(x);
                    }
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((step, layer, si), m)| RangeRow {
            step,
            layer,
            site: RANGE_SITES[si].to_string(),
            min: m.min,
            max: m.max,
            mean: m.mean,
            std: m.std(),
        })
        .collect())
}

/// Largest relative change of `max − min` between the first and the last
/// step over all (layer, site) pairs.
pub fn max_relative_range_shift(rows: &[RangeRow]) -> f64 {
    let (Some(first), Some(last)) = (
        rows.iter().map(|r| r.step).min(),
        rows.iter().map(|r| r.step).max(),
    ) else {
        return 0.0;
    };
    let mut best = 0.0f64;
    for a in rows.iter().filter(|r| r.step == first) {
        if let Some(b) = rows
            .iter()
            .find(|r| r.step == last && r.layer == a.layer && r.site == a.site)
        {
            let denom = a.range().abs().max(1e-300);
            best = best.max((b.range() - a.range()).abs() / denom);
        }
    }
    best
}

/// CSV columns: `step,layer,site,min,max,mean,std`.
pub fn write_range_csv<W: Write>(out: W, rows: &[RangeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "layer", "site", "min", "max", "mean", "std"])?;
    for r in rows {
        w.serialize((r.step, r.layer, &r.site, r.min, r.max, r.mean, r.std))?;
    }
    w.flush()?;
    Ok(())
}
