//! Scratch-initialized text and image encoders.
//!
//! Both produce standardized features, `LayerNorm(Dropout(H))`, over a
//! small transformer stack: `n × d` for text and `(k+1) × d` for images,
//! where row 0 of the image output is the CLS summary.

mod image;
mod text;

pub use image::{patchify, ImageEncoder, ImageEncoderConfig, PatchGrid};
pub use text::{TextEncoder, TextEncoderConfig};
