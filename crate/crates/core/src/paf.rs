//! Progressive attention fusion.
//!
//! Text and image features are projected into a shared hidden width, the
//! text is refined by two attention stages (text self-attention, then text
//! queries over image keys/values, then a GELU feed-forward with a residual
//! to the projected encoder text), and finally by a multi-head cross
//! attention with learnable relative position biases and a gated residual.
//! Image features are never updated here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attend, multi_head, FeedForward, Forward, Init, Linear, Norm};
use crate::numerics::{ParamId, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PafConfig {
    pub d_hidden: usize,
    pub n_heads: usize,
    pub dropout_p: f64,
    pub l_max: usize,
    /// Add the positional table `P` to the stage-3 scores alongside `P^{t,v}`.
    pub self_bias: bool,
}

impl Default for PafConfig {
    fn default() -> Self {
        Self {
            d_hidden: 64,
            n_heads: 4,
            dropout_p: 0.1,
            l_max: 32,
            self_bias: true,
        }
    }
}

impl PafConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 || self.n_heads == 0 || self.l_max == 0 {
            return Err(Error::Config(
                "paf.d_hidden, paf.n_heads and paf.l_max must be positive".into(),
            ));
        }
        if self.d_hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "paf.d_hidden {} not divisible by paf.n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("paf.dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One of the two early fusion stages.
#[derive(Clone, Debug)]
pub struct AttentionStage {
    pub self_q: ParamId,
    pub self_k: ParamId,
    pub self_v: ParamId,
    pub cross_q: ParamId,
    pub cross_k: ParamId,
    pub cross_v: ParamId,
    pub ffn: FeedForward,
    pub norm: Norm,
    pub dropout: f64,
}

/// Intermediate values of a stage, kept for introspection.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub self_probs: Var,
    pub cross_probs: Var,
    pub out: Var,
}

impl AttentionStage {
    pub fn new(init: &mut Init, name: &str, dh: usize, dropout: f64) -> Self {
        Self {
            self_q: init.weight(&format!("{name}.self_q"), dh, dh),
            self_k: init.weight(&format!("{name}.self_k"), dh, dh),
            self_v: init.weight(&format!("{name}.self_v"), dh, dh),
            cross_q: init.weight(&format!("{name}.cross_q"), dh, dh),
            cross_k: init.weight(&format!("{name}.cross_k"), dh, dh),
            cross_v: init.weight(&format!("{name}.cross_v"), dh, dh),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dh, dh),
            norm: Norm::new(init, &format!("{name}.norm"), dh),
            dropout,
        }
    }

    /// Self-attention over `text`, cross-attention with the result as query
    /// and `image` as key/value, feed-forward, then
    /// `LayerNorm(anchor + FFN)`.
    pub fn forward(&self, f: &mut Forward, text: Var, image: Var, anchor: Var) -> Result<StageTrace> {
        let (sq, sk, sv) = (f.p(self.self_q), f.p(self.self_k), f.p(self.self_v));
        let q = f.tape.matmul(text, sq)?;
        let k = f.tape.matmul(text, sk)?;
        let v = f.tape.matmul(text, sv)?;
        let (h_self, self_probs) = attend(&mut f.tape, q, k, v, None)?;
        let h_self = f.dropout(h_self, self.dropout)?;

        let (cq, ck, cv) = (f.p(self.cross_q), f.p(self.cross_k), f.p(self.cross_v));
        let q = f.tape.matmul(h_self, cq)?;
        let k = f.tape.matmul(image, ck)?;
        let v = f.tape.matmul(image, cv)?;
        let (h_cross, cross_probs) = attend(&mut f.tape, q, k, v, None)?;
        let h_cross = f.dropout(h_cross, self.dropout)?;

        let h_ffn = self.ffn.forward(f, h_cross)?;
        let h_ffn = f.dropout(h_ffn, self.dropout)?;
        let sum = f.tape.add(anchor, h_ffn)?;
        let out = self.norm.forward(f, sum)?;
        Ok(StageTrace {
            self_probs,
            cross_probs,
            out,
        })
    }
}

/// Top-left `lq × lk` block of a relative bias table.
pub fn relative_bias_slice(tape: &mut Tape, table: Var, lq: usize, lk: usize) -> Result<Var> {
    let l_max = tape.value(table).rows();
    if lq > l_max || lk > l_max {
        return Err(Error::Length(format!(
            "sequence lengths {lq}×{lk} exceed L_max {l_max}"
        )));
    }
    let rows = tape.slice_rows(table, 0, lq)?;
    tape.slice_cols(rows, 0, lk)
}

/// Eager form of [`relative_bias_slice`].
pub fn relative_bias_block(table: &Tensor, lq: usize, lk: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(table.clone());
    let s = relative_bias_slice(&mut tape, t, lq, lk)?;
    Ok(tape.value(s).clone())
}

/// Third stage: multi-head cross-attention with relative biases and a
/// gated residual, normalized once at the end.
#[derive(Clone, Debug)]
pub struct EnhancedCrossAttention {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub out: ParamId,
    pub gate: ParamId,
    pub bias: ParamId,
    pub bias_tv: ParamId,
    pub norm: Norm,
    pub n_heads: usize,
    pub self_bias: bool,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct CrossTrace {
    /// Per-head attention probabilities, `n × (k+1)` each.
    pub probs: Vec<Var>,
    /// `g ⊙ H + (1 − g) ⊙ r`, before the final normalization.
    pub pre_norm: Var,
    pub gate: Var,
    pub out: Var,
}

/// `g ⊙ h + (1 − g) ⊙ r` with `g` broadcast over rows.
pub fn gated_residual(tape: &mut Tape, gate: Var, h: Var, r: Var) -> Result<Var> {
    let closed = tape.affine(gate, -1.0, 1.0);
    let new = tape.mul_row(h, gate)?;
    let old = tape.mul_row(r, closed)?;
    tape.add(new, old)
}

impl EnhancedCrossAttention {
    pub fn new(init: &mut Init, cfg: &PafConfig) -> Self {
        let dh = cfg.d_hidden;
        Self {
            q: init.weight("paf.stage3.q", dh, dh),
            k: init.weight("paf.stage3.k", dh, dh),
            v: init.weight("paf.stage3.v", dh, dh),
            out: init.weight("paf.stage3.out", dh, dh),
            gate: init.zeros("paf.stage3.gate", &[dh], false),
            bias: init.zeros("paf.stage3.rel_bias", &[cfg.l_max, cfg.l_max], false),
            bias_tv: init.zeros("paf.stage3.rel_bias_tv", &[cfg.l_max, cfg.l_max], false),
            norm: Norm::new(init, "paf.stage3.norm", dh),
            n_heads: cfg.n_heads,
            self_bias: cfg.self_bias,
            dropout: cfg.dropout_p,
        }
    }

    pub fn forward(&self, f: &mut Forward, text: Var, image: Var) -> Result<CrossTrace> {
        let lq = f.tape.value(text).rows();
        let lk = f.tape.value(image).rows();
        let table_tv = f.p(self.bias_tv);
        let mut bias = relative_bias_slice(&mut f.tape, table_tv, lq, lk)?;
        if self.self_bias {
            let table = f.p(self.bias);
            let extra = relative_bias_slice(&mut f.tape, table, lq, lk)?;
            bias = f.tape.add(bias, extra)?;
        }

        let (wq, wk, wv, wo) = (f.p(self.q), f.p(self.k), f.p(self.v), f.p(self.out));
        let q = f.tape.matmul(text, wq)?;
        let k = f.tape.matmul(image, wk)?;
        let v = f.tape.matmul(image, wv)?;
        let (heads, probs) = multi_head(&mut f.tape, q, k, v, self.n_heads, Some(bias))?;
        let h = f.tape.matmul(heads, wo)?;
        let h = f.dropout(h, self.dropout)?;

        let wg = f.p(self.gate);
        let gate = f.tape.sigmoid(wg);
        let pre_norm = gated_residual(&mut f.tape, gate, h, text)?;
        let out = self.norm.forward(f, pre_norm)?;
        Ok(CrossTrace {
            probs,
            pre_norm,
            gate,
            out,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PafParams {
    pub cfg: PafConfig,
    pub proj_text: Linear,
    pub proj_image: Linear,
    pub stages: [AttentionStage; 2],
    pub stage3: EnhancedCrossAttention,
}

#[derive(Clone, Debug)]
pub struct PafOutput {
    /// Projected encoder text `H̃ᵗ`, `n × d_hidden`.
    pub text_proj: Var,
    /// Projected encoder image `H̃ᵛ`, `(k+1) × d_hidden`.
    pub image_proj: Var,
    pub stages: Vec<StageTrace>,
    pub cross: Option<CrossTrace>,
    /// Fused text features, `n × d_hidden`.
    pub fused: Var,
}

impl PafParams {
    pub fn new(init: &mut Init, cfg: &PafConfig, d_model: usize) -> Result<Self> {
        cfg.validate()?;
        let dh = cfg.d_hidden;
        Ok(Self {
            cfg: cfg.clone(),
            proj_text: Linear::new(init, "paf.proj_text", d_model, dh, true),
            proj_image: Linear::new(init, "paf.proj_image", d_model, dh, true),
            stages: [
                AttentionStage::new(init, "paf.stage1", dh, cfg.dropout_p),
                AttentionStage::new(init, "paf.stage2", dh, cfg.dropout_p),
            ],
            stage3: EnhancedCrossAttention::new(init, cfg),
        })
    }

    /// `H̃ = H̄·W + b` for both modalities.
    pub fn project_modalities(&self, f: &mut Forward, text: Var, image: Var) -> Result<(Var, Var)> {
        let t = self.proj_text.forward(f, text)?;
        let v = self.proj_image.forward(f, image)?;
        Ok((t, v))
    }

    /// Full three-stage fusion. With `fuse = false` the stages are skipped
    /// and the projected text is returned as the fused output.
    pub fn forward(&self, f: &mut Forward, text: Var, image: Var, fuse: bool) -> Result<PafOutput> {
        let (text_proj, image_proj) = self.project_modalities(f, text, image)?;
        if !fuse {
            return Ok(PafOutput {
                text_proj,
                image_proj,
                stages: Vec::new(),
                cross: None,
                fused: text_proj,
            });
        }
        let s1 = self.stages[0].forward(f, text_proj, image_proj, text_proj)?;
        let s2 = self.stages[1].forward(f, s1.out, image_proj, text_proj)?;
        let cross = self.stage3.forward(f, s2.out, image_proj)?;
        let fused = cross.out;
        Ok(PafOutput {
            text_proj,
            image_proj,
            stages: vec![s1, s2],
            cross: Some(cross),
            fused,
        })
    }
}
