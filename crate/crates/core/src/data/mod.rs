//! Multimodal examples, their file format, the synthetic corpus, and span
//! level evaluation.

mod jsonl;
mod metrics;
mod synthetic;

use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::mcl::BioLabel;

pub use jsonl::{load_jsonl, parse_jsonl, save_jsonl, to_jsonl};
pub use metrics::{extract_spans, micro_prf, spans_to_labels, AspectSpan, Metrics};
pub use synthetic::{gen_synthetic, vocab, SyntheticConfig};

/// One sentence with its tags and accompanying image.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalExample {
    pub tokens: Vec<usize>,
    pub labels: Vec<BioLabel>,
    pub image: PatchGrid,
}

impl MultimodalExample {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Data("example has no tokens".into()));
        }
        if self.tokens.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} tokens but {} labels",
                self.tokens.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
