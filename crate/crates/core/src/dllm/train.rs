//! Synthetic corpora and a plain SGD trainer for the masked diffusion
//! objective.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grad::{masked_ce_grad, masked_ce_loss_with_mask, sample_mask};
use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// A toy language of noisy successor chains: every token has a fixed
/// successor that follows it with probability `p_follow`, otherwise the
/// next token is uniform. MASK never appears.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub successor: Vec<u32>,
    pub p_follow: f64,
}

impl SyntheticLanguage {
    pub fn new(config: &ModelConfig, p_follow: f64, rng: &mut Rng) -> Self {
        let mut successor: Vec<u32> = (0..config.mask_id()).collect();
        rng.shuffle(&mut successor);
        Self {
            successor,
            p_follow,
        }
    }

    pub fn vocab(&self) -> usize {
        self.successor.len()
    }

    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.below(self.vocab()) as u32;
        for _ in 0..len {
            out.push(cur);
            cur = if rng.bernoulli(self.p_follow) {
                self.successor[cur as usize]
            } else {
                rng.below(self.vocab()) as u32
            };
        }
        out
    }

    pub fn corpus(&self, count: usize, len: usize, rng: &mut Rng) -> Vec<Vec<u32>> {
        (0..count).map(|_| self.sample(len, rng)).collect()
    }
}

/// One sequence per line, space-separated decimal token ids.
pub fn read_token_lines(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    parse_token_lines(&fs::read_to_string(path)?)
}

pub fn parse_token_lines(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>()
                        .map_err(|_| Error::Format(format!("line {}: bad token id {tok:?}", n + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn write_token_lines(path: impl AsRef<Path>, seqs: &[Vec<u32>]) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.05,
            batch_size: 8,
            clip_norm: Some(1.0),
        }
    }
}

/// Trains from a fresh initialisation drawn from `rng`.
pub fn train_toy(
    config: ModelConfig,
    corpus: &[Vec<u32>],
    opts: &TrainOptions,
    rng: &mut Rng,
) -> Result<ModelWeights> {
    let init = ModelWeights::init(config, rng)?;
    train_from(init, corpus, opts, rng)
}

/// Minibatch SGD on the per-token masked diffusion loss with
/// `t ~ Uniform(0, 1]`.
pub fn train_from(
    mut weights: ModelWeights,
    corpus: &[Vec<u32>],
    opts: &TrainOptions,
    rng: &mut Rng,
) -> Result<ModelWeights> {
    let config = weights.config;
    if let Some(bad) = corpus.iter().find(|s| s.len() != config.seq_len) {
        return Err(Error::invalid(format!(
            "corpus sequence has length {}, expected seq_len {}",
            bad.len(),
            config.seq_len
        )));
    }
    if corpus.is_empty() || opts.batch_size == 0 {
        return Ok(weights);
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(opts.batch_size) {
            let mut total = ModelWeights::zeros(config)?;
            for (_, g) in total.named_mut() {
                g.data_mut().fill(0.0);
            }
            let mut batch_loss = 0.0;
            for &i in batch {
                let seq = &corpus[i];
                let t = rng.uniform_open_closed();
                let mask = sample_mask(seq.len(), t, rng);
                let (loss, g) = masked_ce_grad(&weights, seq, &mask, t)?;
                batch_loss += loss;
                let norm = 1.0 / (batch.len() * seq.len()) as f64;
                for ((_, acc), (_, gi)) in total.named_mut().into_iter().zip(g.named()) {
                    acc.axpy(norm, gi)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step, lr: opts.lr });
            }
            let mut factor = 1.0;
            if let Some(clip) = opts.clip_norm {
                let norm = total
                    .named()
                    .iter()
                    .map(|(_, g)| g.frobenius_norm_sq())
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    factor = clip / norm;
                }
            }
            for ((_, w), (_, g)) in weights.named_mut().into_iter().zip(total.named()) {
                w.axpy(-opts.lr * factor, g)?;
            }
            if weights.named().iter().any(|(_, w)| !w.is_finite()) {
                return Err(Error::Diverged { step, lr: opts.lr });
            }
            step += 1;
        }
    }
    Ok(weights)
}

/// Mean per-token masked diffusion loss over `seqs`, evaluated at each
/// `t` in `ts` with masks drawn from `rng`.
pub fn heldout_loss(
    weights: &ModelWeights,
    seqs: &[Vec<u32>],
    ts: &[f64],
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        for &t in ts {
            let mask = sample_mask(seq.len(), t, rng);
            total += masked_ce_loss_with_mask(weights, seq, &mask, t)? / seq.len() as f64;
            count += 1;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}
