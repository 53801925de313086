//! Temporal-mask adaptive sampling of calibration states.
//!
//! Decoding states are bucketed by the decode block they belong to and by
//! the fraction of the response already unmasked. Each (block, bin) cell
//! has a fractional target `n·p[bin]` with `n = ⌊budget/B⌋`; a state is
//! accepted while its cell's counter is strictly below the target, so the
//! realized cap of a cell is `⌈n·p[bin]⌉`. Because those ceilings can sum
//! to more than the budget, the total sample count is also capped at the
//! budget.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dllm::{DecodeSchedule, DecodeSession, DecodeState, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::binio::{BinReader, BinWriter};
use crate::numerics::Rng;

pub const CALIBRATION_MAGIC: &[u8; 4] = b"DLQC";
pub const BINS: usize = 4;
pub const DEFAULT_BUDGET: usize = 512;
pub const DEFAULT_PROPORTIONS: [f64; BINS] = [0.3, 0.2, 0.2, 0.3];
const BIN_EDGES: [f64; 3] = [0.2, 0.5, 0.8];

/// Bin index of an unmask ratio: the number of edges `{0.2, 0.5, 0.8}` it
/// reaches.
pub fn classify_mask_ratio(r: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("mask ratio {r} outside [0, 1]")));
    }
    Ok(BIN_EDGES.iter().filter(|&&e| r >= e).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    Tmas,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub prompt: Vec<u32>,
    pub step: usize,
    pub block: usize,
    /// Unmasked fraction of the response in `state`.
    pub unmask_ratio: f64,
    pub bin: usize,
    pub state: DecodeState,
}

impl CalibrationSample {
    pub fn from_state(prompt: &[u32], state: DecodeState) -> Result<Self> {
        let r = state.unmask_ratio();
        Ok(Self {
            prompt: prompt.to_vec(),
            step: state.step,
            block: state.block,
            unmask_ratio: r,
            bin: classify_mask_ratio(r)?,
            state,
        })
    }

    /// True when the stored tags agree with what the state implies.
    pub fn tags_consistent(&self, schedule: &DecodeSchedule) -> bool {
        let r = self.state.unmask_ratio();
        r == self.unmask_ratio
            && classify_mask_ratio(r).ok() == Some(self.bin)
            && self.step == self.state.step
            && self.block == self.state.block
            && self.block == schedule.block_of_step(self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub strategy: SamplingStrategy,
    pub steps: usize,
    pub blocks: usize,
    pub budget: usize,
    pub targets: [f64; BINS],
    /// `blocks × BINS` acceptance counters.
    pub counters: Vec<[usize; BINS]>,
    pub samples: Vec<CalibrationSample>,
}

/// Per-cell targets `⌊budget/B⌋ · p`.
pub fn cell_targets(budget: usize, blocks: usize, proportions: &[f64; BINS]) -> [f64; BINS] {
    let n = (budget / blocks.max(1)) as f64;
    proportions.map(|p| n * p)
}

impl CalibrationSet {
    pub fn empty(
        strategy: SamplingStrategy,
        steps: usize,
        blocks: usize,
        budget: usize,
        proportions: &[f64; BINS],
    ) -> Self {
        Self {
            strategy,
            steps,
            blocks,
            budget,
            targets: cell_targets(budget, blocks, proportions),
            counters: vec![[0; BINS]; blocks],
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest count a cell may reach: `⌈target⌉`.
    pub fn cell_cap(&self, bin: usize) -> usize {
        self.targets[bin].ceil() as usize
    }

    pub fn is_saturated(&self) -> bool {
        self.samples.len() >= self.budget
            || self
                .counters
                .iter()
                .all(|row| row.iter().zip(&self.targets).all(|(&c, &p)| c as f64 >= p))
    }

    /// Applies the acceptance rule to one state; returns whether it was kept.
    pub fn offer(&mut self, prompt: &[u32], state: &DecodeState) -> Result<bool> {
        if self.samples.len() >= self.budget {
            return Ok(false);
        }
        let r = state.unmask_ratio();
        let bin = classify_mask_ratio(r)?;
        let block = state.block;
        if block >= self.blocks {
            return Err(Error::invalid(format!(
                "state block {block} outside {} blocks",
                self.blocks
            )));
        }
        if (self.counters[block][bin] as f64) < self.targets[bin] {
            self.counters[block][bin] += 1;
            self.samples
                .push(CalibrationSample::from_state(prompt, state.clone())?);
            return Ok(true);
        }
        Ok(false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counters.len() != self.blocks {
            return Err(Error::invalid("counter rows differ from block count"));
        }
        if self.samples.len() > self.budget {
            return Err(Error::invalid(format!(
                "{} samples exceed budget {}",
                self.samples.len(),
                self.budget
            )));
        }
        let mut recount = vec![[0usize; BINS]; self.blocks];
        for s in &self.samples {
            if s.block >= self.blocks || s.bin >= BINS {
                return Err(Error::invalid("sample tagged outside the counter grid"));
            }
            recount[s.block][s.bin] += 1;
        }
        if recount != self.counters {
            return Err(Error::invalid("counters disagree with stored samples"));
        }
        if self.strategy == SamplingStrategy::Tmas {
            for row in &self.counters {
                for (bin, &c) in row.iter().enumerate() {
                    if c > self.cell_cap(bin) {
                        return Err(Error::invalid(format!(
                            "bin {bin} count {c} exceeds its cap"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        self.write_to(&mut w)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        let set = Self::read_from(&mut r)?;
        if !r.at_eof()? {
            return Err(Error::Format("trailing bytes after calibration set".into()));
        }
        Ok(set)
    }

    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.bytes(CALIBRATION_MAGIC)?;
        w.u8(match self.strategy {
            SamplingStrategy::Tmas => 0,
            SamplingStrategy::Uniform => 1,
        })?;
        w.len(self.steps)?;
        w.len(self.blocks)?;
        w.len(self.budget)?;
        for &t in &self.targets {
            w.f64(t)?;
        }
        for row in &self.counters {
            for &c in row {
                w.len(c)?;
            }
        }
        w.len(self.samples.len())?;
        for s in &self.samples {
            write_tokens(w, &s.prompt)?;
            w.len(s.step)?;
            w.len(s.block)?;
            w.u8(s.bin as u8)?;
            w.f64(s.unmask_ratio)?;
            let st = &s.state;
            write_tokens(w, &st.tokens)?;
            for &m in &st.masked {
                w.u8(m as u8)?;
            }
            for &c in &st.confidence {
                w.f64(c)?;
            }
            w.len(st.step)?;
            w.len(st.block)?;
            w.len(st.response_start)?;
            w.len(st.response_len)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        r.magic(CALIBRATION_MAGIC)?;
        let strategy = match r.u8()? {
            0 => SamplingStrategy::Tmas,
            1 => SamplingStrategy::Uniform,
            other => return Err(Error::Format(format!("unknown sampling strategy {other}"))),
        };
        let steps = r.len()?;
        let blocks = r.len()?;
        let budget = r.len()?;
        let mut targets = [0.0; BINS];
        for t in &mut targets {
            *t = r.f64()?;
        }
        let mut counters = Vec::new();
        for _ in 0..blocks {
            let mut row = [0; BINS];
            for c in &mut row {
                *c = r.len()?;
            }
            counters.push(row);
        }
        let n = r.len()?;
        let mut samples = Vec::new();
        for _ in 0..n {
            let prompt = read_tokens(r)?;
            let step = r.len()?;
            let block = r.len()?;
            let bin = r.u8()? as usize;
            let unmask_ratio = r.f64()?;
            let tokens = read_tokens(r)?;
            let masked = (0..tokens.len())
                .map(|_| r.u8().map(|b| b != 0))
                .collect::<Result<Vec<_>>>()?;
            let confidence = (0..tokens.len())
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            let state = DecodeState {
                tokens,
                masked,
                confidence,
                step: r.len()?,
                block: r.len()?,
                response_start: r.len()?,
                response_len: r.len()?,
            };
            samples.push(CalibrationSample {
                prompt,
                step,
                block,
                unmask_ratio,
                bin,
                state,
            });
        }
        let set = Self {
            strategy,
            steps,
            blocks,
            budget,
            targets,
            counters,
            samples,
        };
        set.validate()
            .map_err(|e| Error::Format(format!("inconsistent calibration set: {e}")))?;
        Ok(set)
    }
}

fn write_tokens<W: Write>(w: &mut BinWriter<W>, tokens: &[u32]) -> Result<()> {
    w.len(tokens.len())?;
    for &t in tokens {
        w.u32(t)?;
    }
    Ok(())
}

fn read_tokens<R: Read>(r: &mut BinReader<R>) -> Result<Vec<u32>> {
    let n = r.len()?;
    (0..n).map(|_| r.u32()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmasOptions {
    pub budget: usize,
    pub proportions: [f64; BINS],
}

impl Default for TmasOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            proportions: DEFAULT_PROPORTIONS,
        }
    }
}

/// Bookkeeping from a sampling run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingStats {
    pub forward_passes: usize,
    pub states_offered: usize,
    pub prompts_used: usize,
}

/// Streams decoding states of `prompts` through the acceptance rule,
/// stopping as soon as the set saturates.
pub fn tmas_sample(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
    opts: &TmasOptions,
) -> Result<CalibrationSet> {
    Ok(tmas_sample_with_stats(weights, prompts, schedule, opts)?.0)
}

pub fn tmas_sample_with_stats(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
    opts: &TmasOptions,
) -> Result<(CalibrationSet, SamplingStats)> {
    let mut set = CalibrationSet::empty(
        SamplingStrategy::Tmas,
        schedule.steps,
        schedule.blocks,
        opts.budget,
        &opts.proportions,
    );
    let mut stats = SamplingStats::default();
    'prompts: for prompt in prompts {
        if set.is_saturated() {
            break;
        }
        stats.prompts_used += 1;
        let mut session = DecodeSession::new(weights, prompt, schedule, None)?;
        loop {
            if set.is_saturated() {
                break 'prompts;
            }
            let Some(rec) = session.step()? else { break };
            stats.forward_passes += 1;
            stats.states_offered += 1;
            set.offer(prompt, &rec.state)?;
        }
    }
    Ok((set, stats))
}

/// Baseline: decodes every prompt and keeps a uniformly random subset of
/// `budget` states (in stream order).
pub fn uniform_sample(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
    budget: usize,
    rng: &mut Rng,
) -> Result<CalibrationSet> {
    let mut set = CalibrationSet::empty(
        SamplingStrategy::Uniform,
        schedule.steps,
        schedule.blocks,
        budget,
        &DEFAULT_PROPORTIONS,
    );
    let mut pool = Vec::new();
    for prompt in prompts {
        let (_, states) = crate::dllm::decode(weights, prompt, schedule, None)?;
        pool.extend(states.into_iter().map(|s| (prompt, s)));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(budget);
    idx.sort_unstable();
    for i in idx {
        let (prompt, state) = &pool[i];
        let sample = CalibrationSample::from_state(prompt, state.clone())?;
        set.counters[sample.block][sample.bin] += 1;
        set.samples.push(sample);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_edges() {
        assert_eq!(classify_mask_ratio(0.0).unwrap(), 0);
        assert_eq!(classify_mask_ratio(0.19999).unwrap(), 0);
        assert_eq!(classify_mask_ratio(0.2).unwrap(), 1);
        assert_eq!(classify_mask_ratio(0.5).unwrap(), 2);
        assert_eq!(classify_mask_ratio(0.8).unwrap(), 3);
        assert_eq!(classify_mask_ratio(1.0).unwrap(), 3);
        assert!(classify_mask_ratio(-0.1).is_err());
        assert!(classify_mask_ratio(1.01).is_err());
        assert!(classify_mask_ratio(f64::NAN).is_err());
    }

    #[test]
    fn four_block_targets() {
        let t = cell_targets(512, 4, &DEFAULT_PROPORTIONS);
        assert_eq!(t, [38.4, 25.6, 25.6, 38.4]);
        let set = CalibrationSet::empty(SamplingStrategy::Tmas, 16, 4, 512, &DEFAULT_PROPORTIONS);
        assert_eq!(
            (0..4).map(|b| set.cell_cap(b)).collect::<Vec<_>>(),
            vec![39, 26, 26, 39]
        );
    }

    fn state(step: usize, block: usize, unmasked: usize, len: usize) -> DecodeState {
        DecodeState {
            tokens: (0..len).map(|i| if i < unmasked { 1 } else { 9 }).collect(),
            masked: (0..len).map(|i| i >= unmasked).collect(),
            confidence: vec![0.0; len],
            step,
            block,
            response_start: 0,
            response_len: len,
        }
    }

    #[test]
    fn strict_less_than_caps_cells() {
        let mut set = CalibrationSet::empty(SamplingStrategy::Tmas, 4, 1, 10, &DEFAULT_PROPORTIONS);
        // target 3.0 for bin 0: exactly 3 accepted
        let accepted = (0..10)
            .filter(|_| set.offer(&[1], &state(0, 0, 0, 10)).unwrap())
            .count();
        assert_eq!(accepted, 3);
        assert_eq!(set.counters[0], [3, 0, 0, 0]);
        set.validate().unwrap();
    }

    #[test]
    fn empty_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.dlqc");
        let set = CalibrationSet::empty(SamplingStrategy::Tmas, 16, 4, 512, &DEFAULT_PROPORTIONS);
        set.save(&p).unwrap();
        assert_eq!(CalibrationSet::load(&p).unwrap(), set);
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.dlqc");
        std::fs::write(&p, b"DLQX").unwrap();
        assert!(CalibrationSet::load(&p).is_err());
        let mut set = CalibrationSet::empty(SamplingStrategy::Tmas, 4, 1, 10, &DEFAULT_PROPORTIONS);
        set.offer(&[1, 2], &state(0, 0, 3, 10)).unwrap();
        set.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(CalibrationSet::load(&p).is_err());
    }
}
