//! Model parameters and the `DLQW` checkpoint format.
//!
//! Checkpoint layout: magic `DLQW`, six `u32` config fields (vocab,
//! seq_len, d_model, n_layers, n_heads, d_ff), `u32` record count, then
//! per record a `u32` name length, the UTF-8 name and a `DLQM` matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::binio::{BinReader, BinWriter};
use crate::numerics::{random_normal, Matrix, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLQW";

/// The linear projections of one block, in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Linear {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl Linear {
    pub const ALL: [Linear; 6] = [
        Linear::Query,
        Linear::Key,
        Linear::Value,
        Linear::Output,
        Linear::Up,
        Linear::Down,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Linear::Query => "wq",
            Linear::Key => "wk",
            Linear::Value => "wv",
            Linear::Output => "wo",
            Linear::Up => "w1",
            Linear::Down => "w2",
        }
    }

    /// Activation site feeding this projection.
    pub fn input_site(self) -> InputSite {
        match self {
            Linear::Query | Linear::Key | Linear::Value => InputSite::AttnIn,
            Linear::Output => InputSite::AttnOut,
            Linear::Up => InputSite::FfnIn,
            Linear::Down => InputSite::FfnHidden,
        }
    }
}

/// Inputs of linear projections inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputSite {
    AttnIn,
    AttnOut,
    FfnIn,
    FfnHidden,
}

impl InputSite {
    pub const ALL: [InputSite; 4] = [
        InputSite::AttnIn,
        InputSite::AttnOut,
        InputSite::FfnIn,
        InputSite::FfnHidden,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InputSite::AttnIn => "attn_in",
            InputSite::AttnOut => "attn_out",
            InputSite::FfnIn => "ffn_in",
            InputSite::FfnHidden => "ffn_hidden",
        }
    }
}

/// Canonical name of a per-layer parameter or site, e.g. `layers.2.wq`.
pub fn layer_name(layer: usize, item: &str) -> String {
    format!("layers.{layer}.{item}")
}

pub const HEAD_INPUT_SITE: &str = "head_in";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl LayerWeights {
    pub fn linear(&self, which: Linear) -> &Matrix {
        match which {
            Linear::Query => &self.wq,
            Linear::Key => &self.wk,
            Linear::Value => &self.wv,
            Linear::Output => &self.wo,
            Linear::Up => &self.w1,
            Linear::Down => &self.w2,
        }
    }

    pub fn linear_mut(&mut self, which: Linear) -> &mut Matrix {
        match which {
            Linear::Query => &mut self.wq,
            Linear::Key => &mut self.wk,
            Linear::Value => &mut self.wv,
            Linear::Output => &mut self.wo,
            Linear::Up => &mut self.w1,
            Linear::Down => &mut self.w2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
    pub head: Matrix,
    pub head_bias: Matrix,
}

impl ModelWeights {
    /// All-zero parameters with unit normalisation gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let layer = LayerWeights {
            attn_norm: Matrix::filled(1, d, 1.0),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: Matrix::filled(1, d, 1.0),
            w1: Matrix::zeros(f, d),
            w2: Matrix::zeros(d, f),
        };
        Ok(Self {
            config,
            tok_emb: Matrix::zeros(v, d),
            pos_emb: Matrix::zeros(config.seq_len, d),
            layers: vec![layer; config.n_layers],
            final_norm: Matrix::filled(1, d, 1.0),
            head: Matrix::zeros(v, d),
            head_bias: Matrix::zeros(1, v),
        })
    }

    /// Scaled-normal initialisation.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let (d, f) = (config.d_model as f64, config.d_ff as f64);
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        w.tok_emb = random_normal(rng, config.vocab_size, config.d_model, 1.0);
        w.pos_emb = random_normal(rng, config.seq_len, config.d_model, 0.5);
        for layer in &mut w.layers {
            layer.wq = random_normal(rng, config.d_model, config.d_model, 1.0 / d.sqrt());
            layer.wk = random_normal(rng, config.d_model, config.d_model, 1.0 / d.sqrt());
            layer.wv = random_normal(rng, config.d_model, config.d_model, 1.0 / d.sqrt());
            layer.wo = random_normal(rng, config.d_model, config.d_model, residual / d.sqrt());
            layer.w1 = random_normal(rng, config.d_ff, config.d_model, 1.0 / d.sqrt());
            layer.w2 = random_normal(rng, config.d_model, config.d_ff, residual / f.sqrt());
        }
        w.head = random_normal(rng, config.vocab_size, config.d_model, 1.0 / d.sqrt());
        Ok(w)
    }

    /// Every parameter with its canonical name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((layer_name(l, "attn_norm"), &layer.attn_norm));
            for lin in Linear::ALL {
                if lin == Linear::Up {
                    out.push((layer_name(l, "ffn_norm"), &layer.ffn_norm));
                }
                out.push((layer_name(l, lin.short_name()), layer.linear(lin)));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w1,
                w2,
            } = layer;
            out.push((layer_name(l, "attn_norm"), attn_norm));
            out.push((layer_name(l, "wq"), wq));
            out.push((layer_name(l, "wk"), wk));
            out.push((layer_name(l, "wv"), wv));
            out.push((layer_name(l, "wo"), wo));
            out.push((layer_name(l, "ffn_norm"), ffn_norm));
            out.push((layer_name(l, "w1"), w1));
            out.push((layer_name(l, "w2"), w2));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out.push(("head_bias".to_string(), &mut self.head_bias));
        out
    }

    /// Names of every weight matrix that is quantized: all block
    /// projections and the output head.
    pub fn linear_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.layers.len())
            .flat_map(|l| Linear::ALL.map(|lin| layer_name(l, lin.short_name())))
            .collect();
        names.push("head".to_string());
        names
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.named_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    /// Confirms every matrix has the shape implied by the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::zeros(self.config)?;
        for ((name, actual), (_, expected)) in self.named().into_iter().zip(reference.named()) {
            if actual.shape() != expected.shape() {
                return Err(Error::ShapeMismatch {
                    op: shape_op(&name),
                    left: actual.shape(),
                    right: expected.shape(),
                });
            }
            if !actual.is_finite() {
                return Err(Error::NonFinite("model weights"));
            }
        }
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Config("layer count differs from config".into()));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.bytes(CHECKPOINT_MAGIC)?;
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.seq_len,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_ff,
        ] {
            w.len(v)?;
        }
        let named = self.named();
        w.len(named.len())?;
        for (name, m) in named {
            w.str(&name)?;
            w.matrix(m)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        r.magic(CHECKPOINT_MAGIC)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.len()?;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            seq_len: dims[1],
            d_model: dims[2],
            n_layers: dims[3],
            n_heads: dims[4],
            d_ff: dims[5],
        };
        let mut weights = Self::zeros(config).map_err(|e| Error::Format(e.to_string()))?;
        let count = r.len()?;
        let expected = weights.named().len();
        if count != expected {
            return Err(Error::Format(format!(
                "checkpoint has {count} records, expected {expected}"
            )));
        }
        for _ in 0..count {
            let name = r.str()?;
            let m = r.matrix()?;
            let slot = weights
                .get_mut(&name)
                .ok_or_else(|| Error::Format(format!("unknown record {name}")))?;
            if slot.shape() != m.shape() {
                return Err(Error::Format(format!(
                    "record {name} has shape {:?}",
                    m.shape()
                )));
            }
            *slot = m;
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        self.write_to(&mut w)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        let w = Self::read_from(&mut r)?;
        r.at_eof()?;
        Ok(w)
    }
}

fn shape_op(name: &str) -> &'static str {
    match name.rsplit('.').next().unwrap_or(name) {
        "tok_emb" => "tok_emb",
        "pos_emb" => "pos_emb",
        "head" => "head",
        "head_bias" => "head_bias",
        _ => "model weights",
    }
}
