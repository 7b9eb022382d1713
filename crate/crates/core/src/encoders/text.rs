use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Forward, Init, Norm};
use crate::numerics::{ParamId, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_p: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 16,
            dropout_p: 0.1,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("text.vocab_size", self.vocab_size),
            ("text.d_model", self.d_model),
            ("text.n_heads", self.n_heads),
            ("text.ffn_dim", self.ffn_dim),
            ("text.max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "text.d_model {} not divisible by text.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("text.dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub out_norm: Norm,
}

impl TextEncoder {
    pub fn new(init: &mut Init, cfg: &TextEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let token_embedding = init.embedding("text.token_embedding", cfg.vocab_size, d);
        let position_embedding = init.embedding("text.position_embedding", cfg.max_len, d);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                EncoderLayer::new(
                    init,
                    &format!("text.layer{i}"),
                    d,
                    cfg.n_heads,
                    cfg.ffn_dim,
                    cfg.dropout_p,
                )
            })
            .collect();
        let out_norm = Norm::new(init, "text.out_norm", d);
        Ok(Self {
            cfg: cfg.clone(),
            token_embedding,
            position_embedding,
            layers,
            out_norm,
        })
    }

    /// Standardized token features `H̄ᵗ ∈ ℝ^{n×d}`.
    pub fn forward(&self, f: &mut Forward, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Length("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::Length(format!(
                "{} tokens exceed max_len {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let table = f.p(self.token_embedding);
        let positions = f.p(self.position_embedding);
        let tok = f.tape.gather_rows(table, tokens)?;
        let pos = f.tape.slice_rows(positions, 0, tokens.len())?;
        let mut x = f.tape.add(tok, pos)?;
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        let x = f.dropout(x, self.cfg.dropout_p)?;
        self.out_norm.forward(f, x)
    }
}
