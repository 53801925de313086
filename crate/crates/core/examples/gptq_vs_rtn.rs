//! Error-compensated quantization against plain rounding on random layers
//! with a correlated input Hessian, plus the certainty-weighted variant
//! when a few tokens carry most of the weight.

use dllmquant::dllm::DecodeState;
use dllmquant::methods::{
    cgq_quantize, gptq_quantize, hessian_proxy_loss, rtn_quantize, token_multipliers,
    weighted_output_error, CgqWeights, DEFAULT_DAMP,
};
use dllmquant::numerics::{random_normal, Rng};
use dllmquant::quant::{dequantize, gram, QuantSpec};

fn main() -> dllmquant::Result<()> {
    let spec = QuantSpec::weight(4)?;
    let mut rng = Rng::new(11);
    let (mut rtn_total, mut gptq_total) = (0.0, 0.0);
    for _ in 0..20 {
        let w = random_normal(&mut rng, 16, 16, 1.0);
        // correlated inputs: a shared component on top of noise
        let base = random_normal(&mut rng, 64, 1, 1.0);
        let mut x = random_normal(&mut rng, 64, 16, 0.3);
        for r in 0..64 {
            for c in 0..16 {
                x[(r, c)] += base[(r, 0)];
            }
        }
        let h = gram(&x);
        rtn_total += hessian_proxy_loss(&w, &rtn_quantize(&w, spec), &h)?;
        gptq_total += hessian_proxy_loss(&w, &gptq_quantize(&w, &h, spec, DEFAULT_DAMP)?, &h)?;
    }
    println!(
        "mean output error  rtn {:.3}  gptq {:.3}",
        rtn_total / 20.0,
        gptq_total / 20.0
    );

    // eight of 32 tokens still masked and confidently predicted
    let w = random_normal(&mut rng, 16, 16, 1.0);
    let x = random_normal(&mut rng, 32, 16, 1.0);
    let state = DecodeState {
        tokens: vec![0; 32],
        masked: (0..32).map(|i| i % 4 == 0).collect(),
        confidence: (0..32)
            .map(|i| if i % 4 == 0 { 0.9 } else { 0.02 })
            .collect(),
        step: 0,
        block: 0,
        response_start: 0,
        response_len: 32,
    };
    let m = token_multipliers(&state, &CgqWeights::default());
    let plain = gptq_quantize(&w, &gram(&x), spec, DEFAULT_DAMP)?;
    let weighted = cgq_quantize(&w, &x, &state, spec, &CgqWeights::default(), DEFAULT_DAMP)?;
    println!(
        "weighted output error  gptq {:.3}  cgq {:.3}",
        weighted_output_error(&w, &dequantize(&plain), &x, &m)?,
        weighted_output_error(&w, &dequantize(&weighted), &x, &m)?
    );
    Ok(())
}
