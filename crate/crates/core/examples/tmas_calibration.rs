//! Stratified calibration sampling over decoding states: counts per
//! (block, unmask-ratio bin) against uniform sampling at the same budget.

use dllmquant::dllm::{train_toy, DecodeSchedule, ModelConfig, SyntheticLanguage, TrainOptions};
use dllmquant::numerics::Rng;
use dllmquant::tmas::{tmas_sample_with_stats, uniform_sample, CalibrationSet, TmasOptions};

fn show(name: &str, set: &CalibrationSet) {
    println!("{name}: {} samples", set.len());
    let mut counts = vec![[0usize; 4]; set.counters.len()];
    for s in &set.samples {
        counts[s.block][s.bin] += 1;
    }
    for (b, row) in counts.iter().enumerate() {
        println!("  block {b}: {row:?}");
    }
}

fn main() -> dllmquant::Result<()> {
    let config = ModelConfig::desk();
    let lang = SyntheticLanguage::new(&config, 0.9, &mut Rng::new(42));
    let corpus = lang.corpus(256, config.seq_len, &mut Rng::new(1));
    let opts = TrainOptions {
        epochs: 3,
        lr: 0.5,
        batch_size: 8,
        clip_norm: Some(1.0),
    };
    let weights = train_toy(config, &corpus, &opts, &mut Rng::new(2))?;
    let prompts = lang.corpus(64, config.seq_len / 2, &mut Rng::new(3));
    let schedule = DecodeSchedule::new(16, 16, 2)?;

    let tmas = TmasOptions {
        budget: 128,
        ..TmasOptions::default()
    };
    let (set, stats) = tmas_sample_with_stats(&weights, &prompts, schedule, &tmas)?;
    show("stratified", &set);
    println!("  targets per cell: {:?}", set.targets);
    println!(
        "  forward passes: {} of {} states offered",
        stats.forward_passes, stats.states_offered
    );
    show(
        "uniform",
        &uniform_sample(&weights, &prompts, schedule, 128, &mut Rng::new(4))?,
    );
    Ok(())
}
