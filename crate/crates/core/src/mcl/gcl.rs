use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Symmetric InfoNCE over matched text/image global vectors.
///
/// Rows are L2-normalized, `S = X̂·V̂ᵀ`, and the loss is the mean
/// cross-entropy of `S/τ` against the diagonal, taken once over rows
/// (text as query) and once over columns (image as query).
pub fn gcl_loss(tape: &mut Tape, text: Var, image: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if tape.shape(text) != tape.shape(image) {
        return Err(Error::Dimension(format!(
            "contrastive pairs {:?} vs {:?}",
            tape.shape(text),
            tape.shape(image)
        )));
    }
    let n = tape.value(text).rows();
    let x = tape.l2_normalize_rows(text);
    let v = tape.l2_normalize_rows(image);
    let sim = tape.matmul_bt(x, v)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    let text_to_image = tape.cross_entropy(logits, &targets)?;
    let logits_t = tape.transpose(logits);
    let image_to_text = tape.cross_entropy(logits_t, &targets)?;
    tape.add(text_to_image, image_to_text)
}
