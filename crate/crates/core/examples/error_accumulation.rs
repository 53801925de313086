//! Per-step logits error of a W4A4 model, teacher-forced and free-running,
//! with and without quantizing the softmax·V product.

use dllmquant::dllm::{train_toy, DecodeSchedule, ModelConfig, SyntheticLanguage, TrainOptions};
use dllmquant::harness::{measure_step_error, run_pipeline, ErrorMode, QuantConfig};
use dllmquant::numerics::Rng;

fn main() -> dllmquant::Result<()> {
    let config = ModelConfig::desk();
    let lang = SyntheticLanguage::new(&config, 0.9, &mut Rng::new(42));
    let corpus = lang.corpus(512, config.seq_len, &mut Rng::new(1));
    let opts = TrainOptions {
        epochs: 10,
        lr: 0.5,
        batch_size: 8,
        clip_norm: Some(1.0),
    };
    let fp = train_toy(config, &corpus, &opts, &mut Rng::new(2))?;
    let prompts = lang.corpus(16, config.seq_len / 2, &mut Rng::new(3));
    let schedule = DecodeSchedule::new(16, 16, 4)?;

    for qsm in [true, false] {
        let cfg = QuantConfig {
            quantize_softmax_matmul: qsm,
            ..QuantConfig::default()
        };
        let q = run_pipeline(&fp, &[], schedule, &cfg, 0)?;
        for mode in [ErrorMode::TeacherForced, ErrorMode::FreeRunning] {
            let rep = measure_step_error(&fp, &q.weights, Some(&q.act), &prompts, schedule, mode)?;
            let curve: Vec<String> = rep
                .rows
                .iter()
                .map(|r| format!("{:.2}", r.cumulative))
                .collect();
            println!(
                "softmax·V quantized={qsm:<5} {mode:<14} cumulative: {}",
                curve.join(" ")
            );
        }
    }
    Ok(())
}
