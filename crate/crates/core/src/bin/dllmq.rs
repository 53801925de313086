//! Command-line front end. Every subcommand writes `<out>.manifest.json`
//! next to its output recording the arguments, library version and input
//! digests, which is enough to re-run it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use dllmquant::dllm::{
    heldout_loss, read_token_lines, train_toy, write_token_lines, DecodeSchedule, ModelConfig,
    ModelWeights, SyntheticLanguage, TrainOptions,
};
use dllmquant::harness::{
    activation_range_stats, emit_report, measure_step_error, run_ablation, AblationSetup,
    ErrorMode, QuantConfig, Report, ReportBody, ReportFormat,
};
use dllmquant::methods::{quantize_model, QuantizedModel};
use dllmquant::numerics::Rng;
use dllmquant::tmas::{
    tmas_sample_with_stats, uniform_sample, CalibrationSet, TmasOptions, DEFAULT_BUDGET,
};
use dllmquant::{Result, VERSION};

#[derive(Parser)]
#[command(
    name = "dllmq",
    version,
    about = "Post-training quantization experiments for masked-diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct DecodeArgs {
    /// Total denoising steps T.
    #[arg(long, default_value_t = 16)]
    steps: usize,
    /// Number of blocks B.
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    /// Response length; defaults to half the model's sequence length.
    #[arg(long)]
    gen_len: Option<usize>,
}

impl DecodeArgs {
    fn schedule(&self, config: &ModelConfig) -> Result<DecodeSchedule> {
        DecodeSchedule::new(
            self.gen_len.unwrap_or(config.seq_len / 2),
            self.steps,
            self.blocks,
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and a prompt file from one toy language.
    GenCorpus {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value_t = 1024)]
        count: usize,
        #[arg(long, default_value_t = 200)]
        prompts: usize,
        /// Prompt length; defaults to half the sequence length.
        #[arg(long)]
        prompt_len: Option<usize>,
        #[arg(long, default_value_t = 0.9)]
        p_follow: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (receives corpus.txt and prompts.txt).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus file with the masked diffusion loss.
    Train {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a calibration set from decoding states of a prompt file.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        /// Uniform-random state sampling instead of stratified sampling.
        #[arg(long)]
        uniform: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a checkpoint according to a config file.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// Calibration set; required by calibrated methods.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step logits error of a quantized model against the original.
    EvalError {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        quantized: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value = "teacher-forced")]
        mode: String,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step activation range statistics as CSV.
    Stats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the toggle-grid ablation for every seed in the config.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 64)]
        calib_prompts: usize,
        #[arg(long, default_value_t = 16)]
        eval_prompts: usize,
        #[arg(long, default_value = "teacher-forced")]
        mode: String,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a JSON report into CSV (or re-emit it as JSON).
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn write_manifest(out: &Path, inputs: &[&Path], extra: serde_json::Value) -> Result<()> {
    let mut inputs_json = serde_json::Map::new();
    for p in inputs {
        inputs_json.insert(p.display().to_string(), json!(digest(p)?));
    }
    let manifest = json!({
        "library_version": VERSION,
        "argv": std::env::args().collect::<Vec<_>>(),
        "inputs_sha256": inputs_json,
        "output": out.display().to_string(),
        "details": extra,
    });
    let mut path = out.as_os_str().to_owned();
    path.push(".manifest.json");
    fs::write(
        PathBuf::from(path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<QuantConfig> {
    match path {
        Some(p) => QuantConfig::load(p),
        None => {
            let mut c = QuantConfig::default();
            c.apply_seed_env()?;
            Ok(c)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            preset,
            count,
            prompts,
            prompt_len,
            p_follow,
            seed,
            out,
        } => {
            let config = ModelConfig::preset(&preset)?;
            let mut rng = Rng::new(seed);
            let lang = SyntheticLanguage::new(&config, p_follow, &mut rng);
            fs::create_dir_all(&out)?;
            write_token_lines(
                out.join("corpus.txt"),
                &lang.corpus(count, config.seq_len, &mut rng),
            )?;
            let plen = prompt_len.unwrap_or(config.seq_len / 2);
            write_token_lines(
                out.join("prompts.txt"),
                &lang.corpus(prompts, plen, &mut rng),
            )?;
            write_manifest(
                &out.join("corpus.txt"),
                &[],
                json!({ "preset": preset, "seed": seed, "p_follow": p_follow }),
            )?;
            println!(
                "wrote {count} sequences and {prompts} prompts to {}",
                out.display()
            );
        }
        Command::Train {
            preset,
            corpus,
            epochs,
            lr,
            batch_size,
            seed,
            out,
        } => {
            let config = ModelConfig::preset(&preset)?;
            let seqs = read_token_lines(&corpus)?;
            let opts = TrainOptions {
                epochs,
                lr,
                batch_size,
                clip_norm: Some(1.0),
            };
            let w = train_toy(config, &seqs, &opts, &mut Rng::new(seed))?;
            let held = &seqs[..seqs.len().min(32)];
            let loss = heldout_loss(
                &w,
                held,
                &[0.25, 0.5, 0.75, 1.0],
                &mut Rng::new(seed).derive(3),
            )?;
            w.save(&out)?;
            write_manifest(
                &out,
                &[&corpus],
                json!({ "preset": preset, "options": opts, "seed": seed, "train_loss": loss }),
            )?;
            println!(
                "saved {} parameters to {} (per-token loss {loss:.4})",
                w.parameter_count(),
                out.display()
            );
        }
        Command::Calibrate {
            model,
            prompts,
            decode,
            budget,
            uniform,
            seed,
            out,
        } => {
            let w = ModelWeights::load(&model)?;
            let ps = read_token_lines(&prompts)?;
            let schedule = decode.schedule(&w.config)?;
            let (set, passes) = if uniform {
                (
                    uniform_sample(&w, &ps, schedule, budget, &mut Rng::new(seed))?,
                    None,
                )
            } else {
                let opts = TmasOptions {
                    budget,
                    ..TmasOptions::default()
                };
                let (set, stats) = tmas_sample_with_stats(&w, &ps, schedule, &opts)?;
                (set, Some(stats))
            };
            set.save(&out)?;
            write_manifest(
                &out,
                &[&model, &prompts],
                json!({ "schedule": schedule, "budget": budget, "uniform": uniform, "seed": seed, "stats": passes, "counters": set.counters }),
            )?;
            println!(
                "kept {} states; counters per block: {:?}",
                set.len(),
                set.counters
            );
        }
        Command::Quantize {
            model,
            calib,
            config,
            out,
        } => {
            let w = ModelWeights::load(&model)?;
            let cfg = load_config(config.as_deref())?;
            let set = match &calib {
                Some(p) => CalibrationSet::load(p)?,
                None => CalibrationSet::empty(
                    dllmquant::tmas::SamplingStrategy::Tmas,
                    0,
                    0,
                    cfg.calib_budget,
                    &cfg.tmas_proportions,
                ),
            };
            let q = quantize_model(&w, &set, &cfg)?;
            q.save(&out)?;
            let mut inputs: Vec<&Path> = vec![&model];
            inputs.extend(calib.as_deref());
            inputs.extend(config.as_deref());
            write_manifest(&out, &inputs, serde_json::to_value(&q.manifest)?)?;
            println!(
                "quantized {} matrices (fingerprint {})",
                q.tensors.len(),
                q.manifest.config_fingerprint
            );
        }
        Command::EvalError {
            model,
            quantized,
            prompts,
            decode,
            mode,
            format,
            out,
        } => {
            let w = ModelWeights::load(&model)?;
            let q = QuantizedModel::load(&quantized)?;
            let ps = read_token_lines(&prompts)?;
            let mode: ErrorMode = mode.parse()?;
            let format: ReportFormat = format.parse()?;
            let cfg = &q.manifest.config;
            let rep = measure_step_error(
                &w,
                &q.weights,
                Some(&q.act),
                &ps,
                decode.schedule(&w.config)?,
                mode,
            )?
            .with_meta(cfg.fingerprint(), cfg.seeds[0]);
            println!("final cumulative MSE {:.6}", rep.final_cumulative());
            emit_report(
                &Report::new(cfg, ReportBody::StepError(vec![rep])),
                format,
                &out,
            )?;
            write_manifest(
                &out,
                &[&model, &quantized, &prompts],
                json!({ "mode": mode, "format": format }),
            )?;
        }
        Command::Stats {
            model,
            prompts,
            decode,
            out,
        } => {
            let w = ModelWeights::load(&model)?;
            let ps = read_token_lines(&prompts)?;
            let rows = activation_range_stats(&w, &ps, decode.schedule(&w.config)?)?;
            dllmquant::harness::write_range_csv(fs::File::create(&out)?, &rows)?;
            write_manifest(&out, &[&model, &prompts], json!({ "rows": rows.len() }))?;
            println!("wrote {} rows", rows.len());
        }
        Command::Ablate {
            model,
            prompts,
            config,
            decode,
            calib_prompts,
            eval_prompts,
            mode,
            format,
            out,
        } => {
            let w = ModelWeights::load(&model)?;
            let ps = read_token_lines(&prompts)?;
            let cfg = load_config(config.as_deref())?;
            let setup = AblationSetup {
                fp: &w,
                prompt_pool: &ps,
                calib_prompts,
                eval_prompts,
                schedule: decode.schedule(&w.config)?,
                mode: mode.parse()?,
            };
            let table = run_ablation(&cfg, &setup)?;
            for s in &table.summary {
                println!(
                    "{:<24} mse {:>12.6}  agreement {:.3}",
                    s.cell, s.mean_mse, s.mean_agreement
                );
            }
            emit_report(
                &Report::new(&cfg, ReportBody::Ablation(table.rows)),
                format.parse()?,
                &out,
            )?;
            let mut inputs: Vec<&Path> = vec![&model, &prompts];
            inputs.extend(config.as_deref());
            write_manifest(
                &out,
                &inputs,
                json!({ "config": cfg, "summary": table.summary }),
            )?;
        }
        Command::Report { input, format, out } => {
            let report = Report::load_json(&input)?;
            emit_report(&report, format.parse()?, &out)?;
            write_manifest(&out, &[&input], json!({ "format": format }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
