//! Block-wise confidence-ordered decoding, printed step by step.

use dllmquant::dllm::{
    decode, train_toy, DecodeSchedule, ModelConfig, SyntheticLanguage, TrainOptions,
};
use dllmquant::numerics::Rng;

fn main() -> dllmquant::Result<()> {
    let config = ModelConfig::desk();
    let lang = SyntheticLanguage::new(&config, 0.9, &mut Rng::new(42));
    let corpus = lang.corpus(512, config.seq_len, &mut Rng::new(1));
    let opts = TrainOptions {
        epochs: 15,
        lr: 0.5,
        batch_size: 8,
        clip_norm: Some(1.0),
    };
    let weights = train_toy(config, &corpus, &opts, &mut Rng::new(2))?;
    let prompt = lang.sample(16, &mut Rng::new(5));
    let schedule = DecodeSchedule::new(16, 8, 4)?;
    let (tokens, states) = decode(&weights, &prompt, schedule, None)?;
    let mask = config.mask_id();
    for s in &states {
        let shown: Vec<String> = s.tokens[s.response()]
            .iter()
            .map(|&t| {
                if t == mask {
                    "__".to_string()
                } else {
                    format!("{t:02}")
                }
            })
            .collect();
        println!(
            "step {:>2} block {} ratio {:.2}  {}",
            s.step,
            s.block,
            s.unmask_ratio(),
            shown.join(" ")
        );
    }
    println!("final            {:?}", &tokens[prompt.len()..]);
    Ok(())
}
