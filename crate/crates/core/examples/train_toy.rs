//! Train a desk-sized masked-diffusion model on a synthetic bigram language
//! and report the held-out masked cross-entropy after every few epochs.
//!
//! cargo run --release --example train_toy -- [epochs]

use dllmquant::dllm::{
    heldout_loss, train_from, ModelConfig, ModelWeights, SyntheticLanguage, TrainOptions,
};
use dllmquant::numerics::Rng;

fn main() -> dllmquant::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let config = ModelConfig::desk();
    let lang = SyntheticLanguage::new(&config, 0.9, &mut Rng::new(42));
    let corpus = lang.corpus(1024, config.seq_len, &mut Rng::new(1));
    let heldout = lang.corpus(64, config.seq_len, &mut Rng::new(2));
    let ts = [0.25, 0.5, 0.75, 1.0];

    let mut weights = ModelWeights::init(config, &mut Rng::new(3))?;
    println!("parameters: {}", weights.parameter_count());
    println!("uniform baseline: {:.4}", (config.vocab_size as f64).ln());
    println!(
        "epoch 0: {:.4}",
        heldout_loss(&weights, &heldout, &ts, &mut Rng::new(9))?
    );
    let opts = TrainOptions {
        epochs: 5,
        lr: 0.5,
        batch_size: 8,
        clip_norm: Some(1.0),
    };
    for round in 0..epochs.div_ceil(5) {
        weights = train_from(weights, &corpus, &opts, &mut Rng::new(100 + round as u64))?;
        let loss = heldout_loss(&weights, &heldout, &ts, &mut Rng::new(9))?;
        println!("epoch {}: {loss:.4}", (round + 1) * 5);
    }
    Ok(())
}
