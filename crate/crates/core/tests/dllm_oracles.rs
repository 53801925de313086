mod common;

use dllmquant::dllm::{
    capture_activations, decode, forward, heldout_loss, logits, masked_ce_grad,
    masked_ce_loss_with_mask, sample_mask, train_toy, ActQuantizer, DecodeSchedule, ModelConfig,
    ModelWeights, SyntheticLanguage, TrainOptions, NORM_EPS,
};
use dllmquant::numerics::{Matrix, Rng};
use dllmquant::quant::{fake_quantize, QuantSpec};

// --- straight-line reference forward pass ----------------------------------

fn rms_row(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * s * g).collect()
}

/// `W x` for `W` stored `out × in`.
fn apply(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| (0..w.cols()).map(|i| w[(o, i)] * x[i]).sum())
        .collect()
}

fn reference_logits(w: &ModelWeights, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = w.config;
    let n = tokens.len();
    let dh = c.d_model / c.n_heads;
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..c.d_model)
                .map(|j| w.tok_emb[(tokens[i] as usize, j)] + w.pos_emb[(i, j)])
                .collect()
        })
        .collect();
    for layer in &w.layers {
        let a: Vec<Vec<f64>> = h
            .iter()
            .map(|r| rms_row(r, layer.attn_norm.data()))
            .collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| apply(&layer.wq, r)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| apply(&layer.wk, r)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| apply(&layer.wv, r)).collect();
        let mut cat = vec![vec![0.0; c.d_model]; n];
        for head in 0..c.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                // every position attends to every position: no causal mask
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in cols.clone() {
                    cat[i][d] = (0..n).map(|j| e[j] / z * v[j][d]).sum();
                }
            }
        }
        for i in 0..n {
            let o = apply(&layer.wo, &cat[i]);
            h[i].iter_mut().zip(o).for_each(|(x, y)| *x += y);
            let f = rms_row(&h[i], layer.ffn_norm.data());
            let hidden: Vec<f64> = apply(&layer.w1, &f)
                .into_iter()
                .map(|x| x / (1.0 + (-x).exp()))
                .collect();
            let out = apply(&layer.w2, &hidden);
            h[i].iter_mut().zip(out).for_each(|(x, y)| *x += y);
        }
    }
    h.iter()
        .map(|r| {
            let f = rms_row(r, w.final_norm.data());
            apply(&w.head, &f)
                .into_iter()
                .zip(w.head_bias.data())
                .map(|(x, b)| x + b)
                .collect()
        })
        .collect()
}

fn micro(seed: u64) -> ModelWeights {
    let mut w = ModelWeights::init(ModelConfig::micro(), &mut Rng::new(seed)).unwrap();
    // non-trivial gains and bias so every parameter group is exercised
    let mut rng = Rng::new(seed + 1000);
    for (name, m) in w.named_mut() {
        if name.contains("norm") || name == "head_bias" {
            for v in m.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    w
}

#[test]
fn micro_forward_matches_straight_line_reference() {
    let c = ModelConfig::micro();
    assert_eq!(
        (c.d_model, c.vocab_size, c.seq_len, c.n_layers),
        (8, 16, 4, 1)
    );
    for seed in 0..5 {
        let w = micro(seed);
        let mut rng = Rng::new(seed);
        for _ in 0..5 {
            let tokens: Vec<u32> = (0..c.seq_len)
                .map(|_| rng.below(c.vocab_size) as u32)
                .collect();
            let got = logits(&w, &tokens).unwrap();
            let want = reference_logits(&w, &tokens);
            assert_eq!(got.shape(), (c.seq_len, c.vocab_size));
            for (i, row) in want.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!(
                        (got[(i, j)] - v).abs() < 1e-10,
                        "({i},{j}): {} vs {v}",
                        got[(i, j)]
                    );
                }
            }
        }
    }
}

#[test]
fn positionless_model_is_permutation_equivariant() {
    let mut c = ModelConfig::micro();
    c.seq_len = 8;
    let mut w = ModelWeights::init(c, &mut Rng::new(3)).unwrap();
    w.pos_emb = Matrix::zeros(c.seq_len, c.d_model);
    let m = c.mask_id();
    let tokens = vec![1, m, 4, 7, m, 2, 9, 3];
    let base = logits(&w, &tokens).unwrap();
    let mut rng = Rng::new(4);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..tokens.len()).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<u32> = perm.iter().map(|&i| tokens[i]).collect();
        let out = logits(&w, &permuted).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in out.row(new).iter().zip(base.row(old)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
    // the two masked positions are interchangeable, so their rows coincide
    for (a, b) in base.row(1).iter().zip(base.row(4)) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn trained_micro() -> ModelWeights {
    let mut c = ModelConfig::micro();
    c.seq_len = 8;
    let lang = SyntheticLanguage::new(&c, 0.9, &mut Rng::new(5));
    let corpus = lang.corpus(64, c.seq_len, &mut Rng::new(6));
    let opts = TrainOptions {
        epochs: 5,
        lr: 0.5,
        batch_size: 4,
        clip_norm: Some(1.0),
    };
    train_toy(c, &corpus, &opts, &mut Rng::new(7)).unwrap()
}

#[test]
fn attention_is_bidirectional() {
    let w = trained_micro();
    let m = w.config.mask_id();
    let tokens = vec![3, m, m, 5, m, 1, m, 2];
    let base = logits(&w, &tokens).unwrap();
    for future in 1..tokens.len() {
        let mut changed = tokens.clone();
        changed[future] = if tokens[future] == 0 { 1 } else { 0 };
        let out = logits(&w, &changed).unwrap();
        let earlier_change = (0..future)
            .flat_map(|i| {
                out.row(i)
                    .iter()
                    .zip(base.row(i))
                    .map(|(a, b)| (a - b).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        assert!(
            earlier_change > 1e-9,
            "position {future} does not influence earlier logits"
        );
    }
}

#[test]
fn gradient_matches_central_differences() {
    let w = micro(11);
    let c = w.config;
    let mut rng = Rng::new(12);
    let x0: Vec<u32> = (0..c.seq_len)
        .map(|_| rng.below(c.mask_id() as usize) as u32)
        .collect();
    let mask = vec![true, false, true, true];
    let t = 0.6;
    let (loss, grad) = masked_ce_grad(&w, &x0, &mask, t).unwrap();
    assert!((loss - masked_ce_loss_with_mask(&w, &x0, &mask, t).unwrap()).abs() < 1e-12);

    let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let name = &names[rng.below(names.len())];
        let len = w.get(name).unwrap().data().len();
        let idx = rng.below(len);
        let mut plus = w.clone();
        plus.get_mut(name).unwrap().data_mut()[idx] += h;
        let mut minus = w.clone();
        minus.get_mut(name).unwrap().data_mut()[idx] -= h;
        let fd = (masked_ce_loss_with_mask(&plus, &x0, &mask, t).unwrap()
            - masked_ce_loss_with_mask(&minus, &x0, &mask, t).unwrap())
            / (2.0 * h);
        let g = grad.get(name).unwrap().data()[idx];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(rel < 1e-4, "{name}[{idx}]: analytic {g} vs numeric {fd}");
    }
    assert!(worst < 1e-4);
}

#[test]
fn training_beats_uniform_baseline_and_is_deterministic() {
    let mut c = ModelConfig::micro();
    c.seq_len = 8;
    let lang = SyntheticLanguage::new(&c, 0.95, &mut Rng::new(20));
    let corpus = lang.corpus(200, c.seq_len, &mut Rng::new(21));
    let held = lang.corpus(32, c.seq_len, &mut Rng::new(22));
    // 200 single-sequence steps
    let opts = TrainOptions {
        epochs: 1,
        lr: 0.2,
        batch_size: 1,
        clip_norm: Some(1.0),
    };
    let a = train_toy(c, &corpus, &opts, &mut Rng::new(23)).unwrap();
    let b = train_toy(c, &corpus, &opts, &mut Rng::new(23)).unwrap();
    assert_eq!(a, b);
    let ts = [0.25, 0.5, 0.75, 1.0];
    let init = ModelWeights::init(c, &mut Rng::new(23)).unwrap();
    let before = heldout_loss(&init, &held, &ts, &mut Rng::new(9)).unwrap();
    let after = heldout_loss(&a, &held, &ts, &mut Rng::new(9)).unwrap();
    let baseline = (c.vocab_size as f64).ln();
    assert!(
        after < baseline,
        "held-out loss {after} not below log(vocab) = {baseline}"
    );
    assert!(after < before);
}

#[test]
fn forced_masks_give_closed_forms() {
    let w = ModelWeights::zeros(ModelConfig::micro()).unwrap();
    let x0 = vec![1, 2, 3, 4];
    let t = 0.5;
    let all = masked_ce_loss_with_mask(&w, &x0, &[true; 4], t).unwrap();
    assert!((all - 4.0 * (16f64).ln() / t).abs() < 1e-12);
    assert_eq!(
        masked_ce_loss_with_mask(&w, &x0, &[false; 4], t).unwrap(),
        0.0
    );
    assert!(sample_mask(10, 1.0, &mut Rng::new(0)).iter().all(|&m| m));
}

// --- decoding --------------------------------------------------------------

fn decode_model() -> ModelWeights {
    let mut c = ModelConfig::micro();
    c.seq_len = 16;
    let lang = SyntheticLanguage::new(&c, 0.9, &mut Rng::new(30));
    let corpus = lang.corpus(64, c.seq_len, &mut Rng::new(31));
    let opts = TrainOptions {
        epochs: 3,
        lr: 0.5,
        batch_size: 4,
        clip_norm: Some(1.0),
    };
    train_toy(c, &corpus, &opts, &mut Rng::new(32)).unwrap()
}

#[test]
fn one_position_per_step_when_steps_equal_length() {
    let w = decode_model();
    let sched = DecodeSchedule::new(8, 8, 1).unwrap();
    let (tokens, states) = decode(&w, &[1, 2, 3, 4], sched, None).unwrap();
    assert_eq!(states.len(), 8);
    for pair in states.windows(2) {
        let a = pair[0].masked.iter().filter(|&&m| m).count();
        let b = pair[1].masked.iter().filter(|&&m| m).count();
        assert_eq!(a - b, 1);
    }
    assert!(tokens[4..].iter().all(|&t| t != w.config.mask_id()));
}

#[test]
fn high_bit_quantization_preserves_decoding() {
    let w = decode_model();
    let mut q = w.clone();
    for name in w.linear_names() {
        let m = fake_quantize(w.get(&name).unwrap(), QuantSpec::weight(16).unwrap());
        *q.get_mut(&name).unwrap() = m;
    }
    let act = ActQuantizer::per_token(16, w.config.n_layers, true).unwrap();
    let sched = DecodeSchedule::new(8, 8, 2).unwrap();
    let mut rng = Rng::new(40);
    for _ in 0..10 {
        let prompt: Vec<u32> = (0..8)
            .map(|_| rng.below(w.config.mask_id() as usize) as u32)
            .collect();
        let (a, sa) = decode(&w, &prompt, sched, None).unwrap();
        let (b, sb) = decode(&q, &prompt, sched, Some(&act)).unwrap();
        assert_eq!(a, b);
        let ids = |s: &[dllmquant::dllm::DecodeState]| {
            s.iter().map(|x| x.tokens.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&sa), ids(&sb));
    }
}

#[test]
fn decoding_replays_bitwise() {
    let w = decode_model();
    let sched = DecodeSchedule::new(8, 6, 2).unwrap();
    let prompt = [5, 6, 7, 8, 9, 10, 11, 12];
    assert_eq!(
        decode(&w, &prompt, sched, None).unwrap(),
        decode(&w, &prompt, sched, None).unwrap()
    );
}

#[test]
fn capture_tags_and_monotone_unmasking() {
    let w = decode_model();
    let sched = DecodeSchedule::new(8, 4, 1).unwrap();
    let caps = capture_activations(&w, &[vec![1, 2, 3]], sched).unwrap();
    assert_eq!(caps.len(), 4);
    assert_eq!(
        caps.iter().map(|c| c.step).collect::<Vec<_>>(),
        vec![0, 1, 2, 3]
    );
    let sched = DecodeSchedule::new(8, 8, 2).unwrap();
    let caps = capture_activations(&w, &[vec![4, 5], vec![6]], sched).unwrap();
    assert_eq!(caps.len(), 16);
    for pair in caps.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.prompt_index == b.prompt_index && a.block == b.block {
            assert!(b.state.unmask_ratio() >= a.state.unmask_ratio());
        }
        assert_eq!(a.trace.layers.len(), w.config.n_layers);
    }
    // a second replay produces identical activations
    let again = capture_activations(&w, &[vec![4, 5], vec![6]], sched).unwrap();
    for (x, y) in caps.iter().zip(&again) {
        assert_eq!(x.trace.layers[0].probs, y.trace.layers[0].probs);
        assert_eq!(x.state, y.state);
    }
}

#[test]
fn forward_rejects_mismatched_weights() {
    let mut w = ModelWeights::init(ModelConfig::micro(), &mut Rng::new(0)).unwrap();
    w.layers.pop();
    assert!(forward(&w, &[1, 2], None, false).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let w = micro(2);
    w.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DLQW");
    assert_eq!(ModelWeights::load(&path).unwrap(), w);
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(ModelWeights::load(&path).is_err());
}
