//! Bidirectional forward pass of the mask predictor.
//!
//! Pre-norm blocks with gain-only RMS normalisation, multi-head attention
//! without any causal mask, a SiLU feed-forward, learned absolute position
//! embeddings and a biased output head.

use super::fakequant::ActQuantizer;
use super::weights::{layer_name, InputSite, LayerWeights, HEAD_INPUT_SITE};
use super::ModelWeights;
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix};

pub const NORM_EPS: f64 = 1e-6;

/// Activations captured from one block during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Normalised input of the attention projections.
    pub attn_input: Matrix,
    /// Concatenated head outputs, the input of the output projection.
    pub attn_output: Matrix,
    /// Softmax output P, one matrix per head.
    pub probs: Vec<Matrix>,
    /// Value matrix V, one per head.
    pub values: Vec<Matrix>,
    /// Normalised input of the feed-forward.
    pub ffn_input: Matrix,
    /// Hidden activation, the input of the down projection.
    pub ffn_hidden: Matrix,
}

impl LayerTrace {
    pub fn site(&self, site: InputSite) -> &Matrix {
        match site {
            InputSite::AttnIn => &self.attn_input,
            InputSite::AttnOut => &self.attn_output,
            InputSite::FfnIn => &self.ffn_input,
            InputSite::FfnHidden => &self.ffn_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Normalised final hidden state, the input of the output head.
    pub head_input: Matrix,
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Returns the normalised matrix and the per-row inverse RMS.
pub(crate) fn rms_norm(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / d;
        let s = 1.0 / (ms + NORM_EPS).sqrt();
        for (o, &g) in out.row_mut(r).iter_mut().zip(gain.data()) {
            *o *= s * g;
        }
        inv.push(s);
    }
    (out, inv)
}

/// Token plus position embeddings for a sequence.
pub(crate) fn embed(weights: &ModelWeights, tokens: &[u32]) -> Result<Matrix> {
    let c = &weights.config;
    if tokens.len() > c.seq_len {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds seq_len {}",
            tokens.len(),
            c.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of {}",
            c.vocab_size
        )));
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut h = weights.tok_emb.gather_rows(&idx);
    for i in 0..tokens.len() {
        for (a, &b) in h.row_mut(i).iter_mut().zip(weights.pos_emb.row(i)) {
            *a += b;
        }
    }
    Ok(h)
}

fn linear(act: Option<&ActQuantizer>, site: &str, x: &Matrix, w: &Matrix) -> Result<Matrix> {
    match act {
        Some(q) => q.linear_input(site, x)?.matmul_t(w),
        None => x.matmul_t(w),
    }
}

fn block(
    l: usize,
    layer: &LayerWeights,
    n_heads: usize,
    h: &mut Matrix,
    act: Option<&ActQuantizer>,
    capture: bool,
) -> Result<Option<LayerTrace>> {
    let n = h.rows();
    let d = h.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a_in, _) = rms_norm(h, &layer.attn_norm);
    let site = layer_name(l, InputSite::AttnIn.name());
    let q = linear(act, &site, &a_in, &layer.wq)?;
    let k = linear(act, &site, &a_in, &layer.wk)?;
    let v = linear(act, &site, &a_in, &layer.wv)?;

    let mut cat = Matrix::zeros(n, d);
    let mut probs = Vec::new();
    let mut values = Vec::new();
    for head in 0..n_heads {
        let (qh, kh, vh) = (
            q.columns(head * dh, dh),
            k.columns(head * dh, dh),
            v.columns(head * dh, dh),
        );
        let p = softmax_rows(&qh.matmul_t(&kh)?.scale(scale));
        let o = match act {
            Some(a) => a.softmax_operand(&p).matmul(&a.value_operand(l, &vh))?,
            None => p.matmul(&vh)?,
        };
        cat.set_columns(head * dh, &o);
        if capture {
            probs.push(p);
            values.push(vh);
        }
    }
    let attn = linear(
        act,
        &layer_name(l, InputSite::AttnOut.name()),
        &cat,
        &layer.wo,
    )?;
    h.add_assign(&attn)?;

    let (f_in, _) = rms_norm(h, &layer.ffn_norm);
    let hidden = linear(
        act,
        &layer_name(l, InputSite::FfnIn.name()),
        &f_in,
        &layer.w1,
    )?
    .map(silu);
    let out = linear(
        act,
        &layer_name(l, InputSite::FfnHidden.name()),
        &hidden,
        &layer.w2,
    )?;
    h.add_assign(&out)?;

    Ok(capture.then_some(LayerTrace {
        attn_input: a_in,
        attn_output: cat,
        probs,
        values,
        ffn_input: f_in,
        ffn_hidden: hidden,
    }))
}

/// Logits (`tokens × vocab`) for a token sequence, optionally running the
/// activation fake-quantizer and capturing per-layer activations.
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    act: Option<&ActQuantizer>,
    capture: bool,
) -> Result<(Matrix, Option<ForwardTrace>)> {
    if weights.layers.len() != weights.config.n_layers {
        return Err(Error::Config("layer count differs from config".into()));
    }
    let mut h = embed(weights, tokens)?;
    if h.cols() != weights.config.d_model {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: h.shape(),
            right: (tokens.len(), weights.config.d_model),
        });
    }
    let mut traces = Vec::new();
    for (l, layer) in weights.layers.iter().enumerate() {
        if let Some(t) = block(l, layer, weights.config.n_heads, &mut h, act, capture)? {
            traces.push(t);
        }
    }
    let (fin, _) = rms_norm(&h, &weights.final_norm);
    let mut logits = linear(act, HEAD_INPUT_SITE, &fin, &weights.head)?;
    for r in 0..logits.rows() {
        for (o, &b) in logits.row_mut(r).iter_mut().zip(weights.head_bias.data()) {
            *o += b;
        }
    }
    let trace = capture.then_some(ForwardTrace {
        layers: traces,
        head_input: fin,
    });
    Ok((logits, trace))
}

/// Full-precision logits without capture.
pub fn logits(weights: &ModelWeights, tokens: &[u32]) -> Result<Matrix> {
    Ok(forward(weights, tokens, None, false)?.0)
}
