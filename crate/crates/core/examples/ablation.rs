//! The on/off grid over stratified sampling, certainty-weighted Hessians
//! and the value-scale search on a small trained model.

use dllmquant::dllm::{train_toy, DecodeSchedule, ModelConfig, SyntheticLanguage, TrainOptions};
use dllmquant::harness::{run_ablation, AblationSetup, ErrorMode, QuantConfig};
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
    let pool = lang.corpus(80, config.seq_len / 2, &mut Rng::new(3));
    let setup = AblationSetup {
        fp: &fp,
        prompt_pool: &pool,
        calib_prompts: 32,
        eval_prompts: 8,
        schedule: DecodeSchedule::new(16, 16, 4)?,
        mode: ErrorMode::TeacherForced,
    };
    let base = QuantConfig {
        seeds: vec![0, 1, 2],
        ..QuantConfig::default()
    };
    let table = run_ablation(&base, &setup)?;
    println!("{:<24} {:>10} {:>10}", "cell", "mean mse", "agreement");
    for s in &table.summary {
        println!(
            "{:<24} {:>10.5} {:>10.3}",
            s.cell, s.mean_mse, s.mean_agreement
        );
    }
    Ok(())
}
