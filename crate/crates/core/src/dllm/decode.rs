//! Blockwise iterative decoding with confidence-based remasking.
//!
//! The response starts as all MASK. Blocks are decoded left to right; block
//! `j` gets `⌊T/B⌋` steps (the last block also takes the remainder). Each
//! step predicts every masked position of the active block, scores it by
//! the softmax probability of its argmax token, and commits the
//! `⌈remaining_masked / remaining_steps⌉` most confident predictions (lowest
//! position wins ties). The rest stay masked. Committed tokens never
//! change.

use serde::{Deserialize, Serialize};

use super::fakequant::ActQuantizer;
use super::forward::{forward, ForwardTrace};
use super::ModelWeights;
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix};

/// Model input at one decoding step plus the confidences it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeState {
    pub tokens: Vec<u32>,
    pub masked: Vec<bool>,
    /// Probability of the predicted token for positions predicted at this
    /// step, 0 elsewhere.
    pub confidence: Vec<f64>,
    pub step: usize,
    pub block: usize,
    pub response_start: usize,
    pub response_len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn response(&self) -> std::ops::Range<usize> {
        self.response_start..self.response_start + self.response_len
    }

    /// Fraction of response positions already unmasked.
    pub fn unmask_ratio(&self) -> f64 {
        if self.response_len == 0 {
            return 1.0;
        }
        let unmasked = self.masked[self.response()].iter().filter(|&&m| !m).count();
        unmasked as f64 / self.response_len as f64
    }

    pub fn validate(&self, mask_id: u32) -> Result<()> {
        let n = self.tokens.len();
        if self.masked.len() != n || self.confidence.len() != n {
            return Err(Error::invalid("decode state vectors differ in length"));
        }
        if self.response_start + self.response_len > n {
            return Err(Error::invalid("response span exceeds the sequence"));
        }
        for i in 0..n {
            if self.masked[i] && self.tokens[i] != mask_id {
                return Err(Error::invalid(format!(
                    "position {i} is masked but holds token {}",
                    self.tokens[i]
                )));
            }
            if !(0.0..=1.0).contains(&self.confidence[i]) {
                return Err(Error::invalid(format!(
                    "confidence {} outside [0, 1]",
                    self.confidence[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSchedule {
    pub gen_len: usize,
    pub steps: usize,
    pub blocks: usize,
}

impl DecodeSchedule {
    pub fn new(gen_len: usize, steps: usize, blocks: usize) -> Result<Self> {
        if blocks == 0 || gen_len == 0 {
            return Err(Error::invalid("gen_len and blocks must be positive"));
        }
        if !gen_len.is_multiple_of(blocks) {
            return Err(Error::invalid(format!(
                "gen_len {gen_len} is not divisible by {blocks} blocks"
            )));
        }
        if steps < blocks {
            return Err(Error::invalid(format!(
                "{steps} steps cannot cover {blocks} blocks"
            )));
        }
        Ok(Self {
            gen_len,
            steps,
            blocks,
        })
    }

    /// `⌊T/B⌋`.
    pub fn steps_per_block(&self) -> usize {
        self.steps / self.blocks
    }

    pub fn steps_in_block(&self, block: usize) -> usize {
        let s = self.steps_per_block();
        if block + 1 == self.blocks {
            self.steps - s * (self.blocks - 1)
        } else {
            s
        }
    }

    pub fn block_len(&self) -> usize {
        self.gen_len / self.blocks
    }

    /// Block that owns global step `step` under the `⌊t/s⌋` rule, clamped
    /// to the last block for the remainder steps.
    pub fn block_of_step(&self, step: usize) -> usize {
        (step / self.steps_per_block()).min(self.blocks - 1)
    }
}

/// Output of one decoding step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub state: DecodeState,
    pub logits: Matrix,
    pub trace: Option<ForwardTrace>,
}

/// Step-by-step decoder; one forward pass per call to [`DecodeSession::step`].
pub struct DecodeSession<'a> {
    weights: &'a ModelWeights,
    act: Option<&'a ActQuantizer>,
    schedule: DecodeSchedule,
    tokens: Vec<u32>,
    masked: Vec<bool>,
    response_start: usize,
    block: usize,
    step_in_block: usize,
    step: usize,
    capture: bool,
    forward_passes: usize,
}

impl<'a> DecodeSession<'a> {
    pub fn new(
        weights: &'a ModelWeights,
        prompt: &[u32],
        schedule: DecodeSchedule,
        act: Option<&'a ActQuantizer>,
    ) -> Result<Self> {
        let c = &weights.config;
        if prompt.len() + schedule.gen_len > c.seq_len {
            return Err(Error::invalid(format!(
                "prompt of {} tokens is longer than seq_len - gen_len = {}",
                prompt.len(),
                c.seq_len.saturating_sub(schedule.gen_len)
            )));
        }
        let mask_id = c.mask_id();
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::invalid(format!(
                "prompt token {bad} outside vocabulary"
            )));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend(std::iter::repeat_n(mask_id, schedule.gen_len));
        let mut masked = vec![false; prompt.len()];
        masked.extend(std::iter::repeat_n(true, schedule.gen_len));
        // A prompt may legitimately contain MASK ids; treat them as masked.
        for (m, &t) in masked.iter_mut().zip(&tokens).take(prompt.len()) {
            *m = t == mask_id;
        }
        Ok(Self {
            weights,
            act,
            schedule,
            tokens,
            masked,
            response_start: prompt.len(),
            block: 0,
            step_in_block: 0,
            step: 0,
            capture: false,
            forward_passes: 0,
        })
    }

    pub fn with_capture(mut self, capture: bool) -> Self {
        self.capture = capture;
        self
    }

    pub fn is_done(&self) -> bool {
        self.block >= self.schedule.blocks
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    /// Runs one step; `None` once every block is finished.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let (logits, trace) = forward(self.weights, &self.tokens, self.act, self.capture)?;
        self.forward_passes += 1;

        let mask_id = self.weights.config.mask_id() as usize;
        let span_start = self.response_start + self.block * self.schedule.block_len();
        let span = span_start..span_start + self.schedule.block_len();

        let mut confidence = vec![0.0; self.tokens.len()];
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for i in span.clone() {
            if !self.masked[i] {
                continue;
            }
            let mut row = logits.row(i).to_vec();
            row[mask_id] = f64::NEG_INFINITY;
            softmax_in_place(&mut row);
            let mut best = 0;
            for (v, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = v;
                }
            }
            confidence[i] = row[best];
            candidates.push((i, best as u32, row[best]));
        }

        let state = DecodeState {
            tokens: self.tokens.clone(),
            masked: self.masked.clone(),
            confidence,
            step: self.step,
            block: self.block,
            response_start: self.response_start,
            response_len: self.schedule.gen_len,
        };

        let remaining_steps = self.schedule.steps_in_block(self.block) - self.step_in_block;
        let k = candidates.len().div_ceil(remaining_steps);
        // stable sort keeps lower positions first among equal confidences
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        for &(pos, tok, _) in candidates.iter().take(k) {
            self.tokens[pos] = tok;
            self.masked[pos] = false;
        }

        self.step += 1;
        self.step_in_block += 1;
        if self.step_in_block == self.schedule.steps_in_block(self.block) {
            self.block += 1;
            self.step_in_block = 0;
        }
        Ok(Some(StepRecord {
            state,
            logits,
            trace,
        }))
    }
}

/// Decodes a response and records the state of every step.
pub fn decode(
    weights: &ModelWeights,
    prompt: &[u32],
    schedule: DecodeSchedule,
    act: Option<&ActQuantizer>,
) -> Result<(Vec<u32>, Vec<DecodeState>)> {
    let mut session = DecodeSession::new(weights, prompt, schedule, act)?;
    let mut states = Vec::with_capacity(schedule.steps);
    while let Some(rec) = session.step()? {
        states.push(rec.state);
    }
    Ok((session.tokens().to_vec(), states))
}

/// Like [`decode`] but also returns the logits of every step.
pub fn decode_with_logits(
    weights: &ModelWeights,
    prompt: &[u32],
    schedule: DecodeSchedule,
    act: Option<&ActQuantizer>,
) -> Result<(Vec<u32>, Vec<StepRecord>)> {
    let mut session = DecodeSession::new(weights, prompt, schedule, act)?;
    let mut records = Vec::with_capacity(schedule.steps);
    while let Some(rec) = session.step()? {
        records.push(rec);
    }
    Ok((session.tokens().to_vec(), records))
}

/// One tagged trace from [`capture_activations`].
#[derive(Debug, Clone)]
pub struct CapturedStep {
    pub prompt_index: usize,
    pub step: usize,
    pub block: usize,
    pub trace: ForwardTrace,
    pub state: DecodeState,
}

/// Replays full-precision decoding over `prompts`, capturing every layer's
/// activations at every step.
pub fn capture_activations(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    schedule: DecodeSchedule,
) -> Result<Vec<CapturedStep>> {
    let mut out = Vec::with_capacity(prompts.len() * schedule.steps);
    for (pi, prompt) in prompts.iter().enumerate() {
        let mut session = DecodeSession::new(weights, prompt, schedule, None)?.with_capture(true);
        while let Some(rec) = session.step()? {
            out.push(CapturedStep {
                prompt_index: pi,
                step: rec.state.step,
                block: rec.state.block,
                trace: rec.trace.expect("capture enabled"),
                state: rec.state,
            });
        }
    }
    Ok(out)
}
