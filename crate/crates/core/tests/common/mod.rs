//! Helpers shared by the integration tests.
#![allow(dead_code)]

use dllmquant::dllm::{
    train_from, DecodeSchedule, DecodeState, ModelConfig, ModelWeights, SyntheticLanguage,
    TrainOptions,
};
use dllmquant::numerics::{random_normal, Matrix, Rng};
use dllmquant::quant::{quantize_weight, QuantSpec};

/// Naive triple loop, independent of the library's matmul.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    random_normal(&mut Rng::new(seed), rows, cols, 1.0)
}

/// `a` with row-major elements given as a flat list.
pub fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
}

/// Synthetic bigram language for the desk preset, fixed seed.
pub fn desk_language() -> (ModelConfig, SyntheticLanguage) {
    let c = ModelConfig::desk();
    let lang = SyntheticLanguage::new(&c, 0.9, &mut Rng::new(42));
    (c, lang)
}

/// Desk-sized model trained for `epochs` passes over a 1024-sequence corpus.
pub fn trained_desk(epochs: usize) -> ModelWeights {
    let (c, lang) = desk_language();
    let corpus = lang.corpus(1024, c.seq_len, &mut Rng::new(42).derive(1));
    let init = ModelWeights::init(c, &mut Rng::new(1)).unwrap();
    let opts = TrainOptions {
        epochs,
        lr: 0.5,
        batch_size: 8,
        clip_norm: Some(1.0),
    };
    train_from(init, &corpus, &opts, &mut Rng::new(100)).unwrap()
}

/// Prompts of half the sequence length drawn from the desk language.
pub fn desk_prompts(count: usize, seed: u64) -> Vec<Vec<u32>> {
    let (c, lang) = desk_language();
    lang.corpus(count, c.seq_len / 2, &mut Rng::new(seed))
}

pub fn desk_schedule() -> DecodeSchedule {
    DecodeSchedule::new(16, 16, 4).unwrap()
}

/// Best `tr(E h Eᵀ)` over every code assignment of a one-row weight, with
/// the per-channel scale fixed from `w`.
pub fn exhaustive_best(w: &Matrix, h: &Matrix, bits: u8) -> f64 {
    let spec = QuantSpec::weight(bits).unwrap();
    let scale = quantize_weight(w, bits).unwrap().scales[0];
    let levels: Vec<i32> = (spec.q_min()..=spec.q_max()).collect();
    let n = w.cols();
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; n];
    loop {
        let e: Vec<f64> = (0..n)
            .map(|j| w[(0, j)] - levels[idx[j]] as f64 * scale)
            .collect();
        let mut loss = 0.0;
        for a in 0..n {
            for b in 0..n {
                loss += e[a] * h[(a, b)] * e[b];
            }
        }
        best = best.min(loss);
        let mut k = 0;
        while k < n {
            idx[k] += 1;
            if idx[k] < levels.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == n {
            return best;
        }
    }
}

/// The weighted value error written out from scratch: per row, the range
/// widened to contain zero gives `ŝ`, the scale is `α·ŝ`, the zero point
/// and codes are clamped to `[0, 2^bits − 1]`.
pub fn iaaq_reference_loss(v: &Matrix, p: &Matrix, bits: u8, alpha: f64) -> f64 {
    let q_max = ((1u32 << bits) - 1) as f64;
    let mut err = Matrix::zeros(v.rows(), v.cols());
    for r in 0..v.rows() {
        let lo = v.row(r).iter().fold(0.0f64, |m, &x| m.min(x));
        let hi = v.row(r).iter().fold(0.0f64, |m, &x| m.max(x));
        let s = alpha * (hi - lo).max(1e-12) / q_max;
        let z = (-lo / s).round().clamp(0.0, q_max);
        for c in 0..v.cols() {
            let code = ((v[(r, c)] / s).round() + z).clamp(0.0, q_max);
            err[(r, c)] = (code - z) * s - v[(r, c)];
        }
    }
    naive_matmul(p, &err).frobenius_norm_sq()
}

/// Synthetic state: a response of `len` tokens with `unmasked` already
/// committed, tagged with the given step and block.
pub fn synthetic_state(step: usize, block: usize, unmasked: usize, len: usize) -> DecodeState {
    DecodeState {
        tokens: (0..len).map(|i| if i < unmasked { 1 } else { 9 }).collect(),
        masked: (0..len).map(|i| i >= unmasked).collect(),
        confidence: (0..len)
            .map(|i| if i >= unmasked { 0.5 } else { 0.0 })
            .collect(),
        step,
        block,
        response_start: 0,
        response_len: len,
    }
}

/// The acceptance loop re-simulated on plain integers: a state is kept iff
/// fewer than `budget` states are kept so far and its cell count is
/// strictly below `⌊budget/B⌋ · p[bin]`. Returns the kept indices and the
/// counters.
pub fn resimulate(
    stream: &[(usize, f64)],
    blocks: usize,
    budget: usize,
    p: &[f64; 4],
) -> (Vec<usize>, Vec<[usize; 4]>) {
    let n = (budget / blocks) as f64;
    let mut counts = vec![[0usize; 4]; blocks];
    let mut kept = Vec::new();
    for (i, &(block, r)) in stream.iter().enumerate() {
        if kept.len() >= budget {
            break;
        }
        let bin = (r >= 0.2) as usize + (r >= 0.5) as usize + (r >= 0.8) as usize;
        if (counts[block][bin] as f64) < n * p[bin] {
            counts[block][bin] += 1;
            kept.push(i);
        }
    }
    (kept, counts)
}
