//! Layers shared by the encoders and the fusion network.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var, LN_EPS};

/// Everything a forward pass needs: the tape it records on, the parameter
/// values, the mode, and the dropout stream.
pub struct Forward<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    pub training: bool,
    pub rng: Rng,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamStore, training: bool, rng: Rng) -> Self {
        Self {
            tape: Tape::new(),
            params,
            training,
            rng,
        }
    }

    /// Evaluation-mode pass; the stream is never drawn from.
    pub fn eval(params: &'a ParamStore) -> Self {
        Self::new(params, false, Rng::new(0))
    }

    /// Run an eval-mode pass that records onto an existing tape.
    pub fn on_tape<R>(
        tape: &mut Tape,
        params: &'a ParamStore,
        body: impl FnOnce(&mut Forward<'a>) -> Result<R>,
    ) -> Result<R> {
        let mut f = Self::eval(params);
        f.tape = std::mem::take(tape);
        let out = body(&mut f);
        *tape = f.tape;
        out
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.training, &mut self.rng)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }
}

/// Parameter initialization.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.uniform_range(-bound, bound))
            .collect();
        let t = Tensor::from_parts(vec![fan_in, fan_out], data);
        self.store.add(name, t, true)
    }

    /// Normal(0, 0.02).
    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        let data = (0..rows * dim).map(|_| self.rng.normal(0.0, 0.02)).collect();
        self.store.add(name, Tensor::from_parts(vec![rows, dim], data), true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], decay: bool) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), decay)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0), false)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = init.weight(&format!("{name}.weight"), d_in, d_out);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), &[d_out], false));
        Self { weight, bias }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.p(self.weight);
        let y = f.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.p(b);
                f.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            gamma: init.ones(&format!("{name}.gamma"), &[d]),
            beta: init.zeros(&format!("{name}.beta"), &[d], false),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let g = f.p(self.gamma);
        let b = f.p(self.beta);
        f.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Scaled dot-product attention for one head.
///
/// Returns the attended values and the row-stochastic probability matrix.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let dk = tape.value(q).cols();
    let scores = tape.matmul_bt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    let probs = tape.softmax_rows(scores);
    let out = tape.matmul(probs, v)?;
    Ok((out, probs))
}

/// Split projected `q`, `k`, `v` into heads, attend, and concatenate.
pub fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    bias: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(q).cols();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {n_heads} heads")));
    }
    if n_heads == 1 {
        let (o, p) = attend(tape, q, k, v, bias)?;
        return Ok((o, vec![p]));
    }
    let dk = d / n_heads;
    let mut outs = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let (o, p) = attend(tape, qh, kh, vh, bias)?;
        outs.push(o);
        probs.push(p);
    }
    Ok((tape.concat_cols(&outs)?, probs))
}

/// Multi-head self-attention with input and output projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, n_heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d, true),
            k: Linear::new(init, &format!("{name}.k"), d, d, true),
            v: Linear::new(init, &format!("{name}.v"), d, d, true),
            out: Linear::new(init, &format!("{name}.out"), d, d, true),
            n_heads,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, x)?;
        let v = self.v.forward(f, x)?;
        let (h, _) = multi_head(&mut f.tape, q, k, v, self.n_heads, None)?;
        self.out.forward(f, h)
    }
}

/// `W₂·GELU(W₁x + b₁) + b₂`
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), d, hidden, true),
            down: Linear::new(init, &format!("{name}.down"), hidden, d, true),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.up.forward(f, x)?;
        let h = f.tape.gelu(h);
        self.down.forward(f, h)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: SelfAttention,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, name: &str, d: usize, n_heads: usize, ffn_dim: usize, dropout: f64) -> Self {
        Self {
            attn: SelfAttention::new(init, &format!("{name}.attn"), d, n_heads),
            norm1: Norm::new(init, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, ffn_dim),
            norm2: Norm::new(init, &format!("{name}.norm2"), d),
            dropout,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let a = self.attn.forward(f, x)?;
        let a = f.dropout(a, self.dropout)?;
        let x = f.tape.add(x, a)?;
        let x = self.norm1.forward(f, x)?;
        let h = self.ffn.forward(f, x)?;
        let h = f.dropout(h, self.dropout)?;
        let x = f.tape.add(x, h)?;
        self.norm2.forward(f, x)
    }
}
