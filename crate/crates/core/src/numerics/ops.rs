//! Eager versions of the tape primitives, for callers that need a value and
//! no gradient. Each one runs the same kernel as the tape.

use crate::error::Result;
use crate::numerics::{Rng, Tape, Tensor};

fn unary(
    x: &Tensor,
    f: impl FnOnce(&mut Tape, crate::numerics::Var) -> Result<crate::numerics::Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = f(&mut tape, v)?;
    Ok(tape.value(y).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.matmul(va, vb)?;
    Ok(tape.value(y).clone())
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| Ok(t.softmax_rows(v)))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let y = tape.layer_norm(v, g, b, eps)?;
    Ok(tape.value(y).clone())
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| Ok(t.gelu(v)))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| Ok(t.sigmoid(v)))
}

pub fn dropout(x: &Tensor, p: f64, training: bool, rng: &mut Rng) -> Result<Tensor> {
    unary(x, |t, v| t.dropout(v, p, training, rng))
}

pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| Ok(t.l2_normalize_rows(v)))
}
