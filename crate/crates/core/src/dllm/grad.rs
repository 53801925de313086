//! Masked cross-entropy diffusion loss and its gradient.
//!
//! `L = -(1/t) Σ_i 1[x_t^i = MASK] · log p(x_0^i | x_t)`, where each position
//! of `x_0` is masked independently with probability `t`.

use super::forward::{embed, rms_norm, silu};
use super::ModelWeights;
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix, Rng};

/// Forward-process mask: each position masked independently with
/// probability `t`.
pub fn sample_mask(len: usize, t: f64, rng: &mut Rng) -> Vec<bool> {
    (0..len).map(|_| rng.bernoulli(t)).collect()
}

fn apply_mask(weights: &ModelWeights, x0: &[u32], mask: &[bool]) -> Vec<u32> {
    let mask_id = weights.config.mask_id();
    x0.iter()
        .zip(mask)
        .map(|(&t, &m)| if m { mask_id } else { t })
        .collect()
}

fn check(x0: &[u32], mask: &[bool], t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("t must lie in (0, 1], got {t}")));
    }
    if x0.len() != mask.len() {
        return Err(Error::invalid("mask length differs from sequence length"));
    }
    Ok(())
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

/// Loss for an explicit mask. Zero when nothing is masked.
pub fn masked_ce_loss_with_mask(
    weights: &ModelWeights,
    x0: &[u32],
    mask: &[bool],
    t: f64,
) -> Result<f64> {
    check(x0, mask, t)?;
    if !mask.iter().any(|&m| m) {
        return Ok(0.0);
    }
    let xt = apply_mask(weights, x0, mask);
    let logits = super::forward::logits(weights, &xt)?;
    let mut total = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            total -= log_softmax_at(logits.row(i), x0[i] as usize);
        }
    }
    Ok(total / t)
}

/// Samples the forward-process mask from `rng` and evaluates the loss.
pub fn masked_ce_loss(weights: &ModelWeights, x0: &[u32], t: f64, rng: &mut Rng) -> Result<f64> {
    let mask = sample_mask(x0.len(), t, rng);
    masked_ce_loss_with_mask(weights, x0, &mask, t)
}

struct LayerCache {
    h_in: Matrix,
    inv_attn: Vec<f64>,
    a_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    cat: Matrix,
    h_mid: Matrix,
    inv_ffn: Vec<f64>,
    f_in: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

#[allow(clippy::needless_range_loop)]
fn rms_norm_backward(x: &Matrix, inv: &[f64], gain: &Matrix, dy: &Matrix) -> (Matrix, Matrix) {
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dgain = Matrix::zeros(1, x.cols());
    for r in 0..x.rows() {
        let (xr, dyr, s) = (x.row(r), dy.row(r), inv[r]);
        let mut dot = 0.0;
        for j in 0..xr.len() {
            dot += dyr[j] * gain.data()[j] * xr[j];
            dgain.data_mut()[j] += dyr[j] * xr[j] * s;
        }
        let coef = s * s * s * dot / d;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * gain.data()[j] * dyr[j] - coef * xr[j];
        }
    }
    (dx, dgain)
}

/// Loss and gradient with respect to every parameter for an explicit mask.
pub fn masked_ce_grad(
    weights: &ModelWeights,
    x0: &[u32],
    mask: &[bool],
    t: f64,
) -> Result<(f64, ModelWeights)> {
    check(x0, mask, t)?;
    let config = weights.config;
    let mut grad = ModelWeights::zeros(config)?;
    for (_, g) in grad.named_mut() {
        g.data_mut().fill(0.0);
    }
    if !mask.iter().any(|&m| m) {
        return Ok((0.0, grad));
    }
    let xt = apply_mask(weights, x0, mask);
    let n = xt.len();
    let d = config.d_model;
    let nh = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // forward with cache
    let mut h = embed(weights, &xt)?;
    let mut caches = Vec::with_capacity(config.n_layers);
    for layer in &weights.layers {
        let h_in = h.clone();
        let (a_in, inv_attn) = rms_norm(&h, &layer.attn_norm);
        let q = a_in.matmul_t(&layer.wq)?;
        let k = a_in.matmul_t(&layer.wk)?;
        let v = a_in.matmul_t(&layer.wv)?;
        let mut cat = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(nh);
        for head in 0..nh {
            let (qh, kh, vh) = (
                q.columns(head * dh, dh),
                k.columns(head * dh, dh),
                v.columns(head * dh, dh),
            );
            let p = softmax_rows(&qh.matmul_t(&kh)?.scale(scale));
            cat.set_columns(head * dh, &p.matmul(&vh)?);
            probs.push(p);
        }
        h.add_assign(&cat.matmul_t(&layer.wo)?)?;
        let h_mid = h.clone();
        let (f_in, inv_ffn) = rms_norm(&h, &layer.ffn_norm);
        let pre = f_in.matmul_t(&layer.w1)?;
        let hidden = pre.map(silu);
        h.add_assign(&hidden.matmul_t(&layer.w2)?)?;
        caches.push(LayerCache {
            h_in,
            inv_attn,
            a_in,
            q,
            k,
            v,
            probs,
            cat,
            h_mid,
            inv_ffn,
            f_in,
            pre,
            hidden,
        });
    }
    let (fin, inv_final) = rms_norm(&h, &weights.final_norm);
    let mut logits = fin.matmul_t(&weights.head)?;
    for r in 0..n {
        for (o, &b) in logits.row_mut(r).iter_mut().zip(weights.head_bias.data()) {
            *o += b;
        }
    }

    // loss and dlogits
    let probs_out = softmax_rows(&logits);
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(n, config.vocab_size);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let target = x0[i] as usize;
        loss -= log_softmax_at(logits.row(i), target);
        let row = dlogits.row_mut(i);
        row.copy_from_slice(probs_out.row(i));
        row[target] -= 1.0;
        for v in row.iter_mut() {
            *v /= t;
        }
    }
    loss /= t;

    // head
    grad.head = dlogits.t_matmul(&fin)?;
    for r in 0..n {
        for (g, &v) in grad.head_bias.data_mut().iter_mut().zip(dlogits.row(r)) {
            *g += v;
        }
    }
    let dfin = dlogits.matmul(&weights.head)?;
    let (mut dh_res, dgain) = rms_norm_backward(&h, &inv_final, &weights.final_norm, &dfin);
    grad.final_norm = dgain;

    for (l, cache) in caches.iter().enumerate().rev() {
        let layer = &weights.layers[l];
        // feed-forward
        let g = &mut grad.layers[l];
        g.w2 = dh_res.t_matmul(&cache.hidden)?;
        let dhidden = dh_res.matmul(&layer.w2)?;
        let mut dpre = dhidden;
        for (dv, &u) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            let s = 1.0 / (1.0 + (-u).exp());
            *dv *= s * (1.0 + u * (1.0 - s));
        }
        g.w1 = dpre.t_matmul(&cache.f_in)?;
        let df_in = dpre.matmul(&layer.w1)?;
        let (dx, dgain) = rms_norm_backward(&cache.h_mid, &cache.inv_ffn, &layer.ffn_norm, &df_in);
        g.ffn_norm = dgain;
        dh_res.add_assign(&dx)?;

        // attention
        g.wo = dh_res.t_matmul(&cache.cat)?;
        let dcat = dh_res.matmul(&layer.wo)?;
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for head in 0..nh {
            let p = &cache.probs[head];
            let (qh, kh, vh) = (
                cache.q.columns(head * dh, dh),
                cache.k.columns(head * dh, dh),
                cache.v.columns(head * dh, dh),
            );
            let dout = dcat.columns(head * dh, dh);
            let dp = dout.matmul_t(&vh)?;
            dv.set_columns(head * dh, &p.t_matmul(&dout)?);
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let dot: f64 = p.row(i).iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
                for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                    *o = p[(i, j)] * (dp[(i, j)] - dot) * scale;
                }
            }
            dq.set_columns(head * dh, &ds.matmul(&kh)?);
            dk.set_columns(head * dh, &ds.t_matmul(&qh)?);
        }
        g.wq = dq.t_matmul(&cache.a_in)?;
        g.wk = dk.t_matmul(&cache.a_in)?;
        g.wv = dv.t_matmul(&cache.a_in)?;
        let mut da = dq.matmul(&layer.wq)?;
        da.add_assign(&dk.matmul(&layer.wk)?)?;
        da.add_assign(&dv.matmul(&layer.wv)?)?;
        let (dx, dgain) = rms_norm_backward(&cache.h_in, &cache.inv_attn, &layer.attn_norm, &da);
        g.attn_norm = dgain;
        dh_res.add_assign(&dx)?;
    }

    // embeddings
    let idx: Vec<usize> = xt.iter().map(|&t| t as usize).collect();
    grad.tok_emb.scatter_add_rows(&idx, &dh_res)?;
    let positions: Vec<usize> = (0..n).collect();
    grad.pos_emb.scatter_add_rows(&positions, &dh_res)?;

    Ok((loss, grad))
}
