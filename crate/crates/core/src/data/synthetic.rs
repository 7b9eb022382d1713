//! Synthetic multimodal aspect corpus.
//!
//! Every sentence carries 1–3 aspect spans of 1–2 tokens, separated by at
//! least one `O` token. A span's polarity is written twice: its head token
//! comes from a polarity-specific id range, and the image patch whose
//! row-major index equals the head's position is painted with the
//! polarity's channel. With probability 0.3 one of the two is removed: the
//! head token is replaced by a polarity-free "ambiguous" id, or the patch is
//! left as background. Neither modality alone therefore determines every
//! polarity.

use serde::{Deserialize, Serialize};

use super::MultimodalExample;
use crate::encoders::{ImageEncoderConfig, PatchGrid, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::mcl::{BioLabel, Polarity};
use crate::numerics::Rng;

/// Probability that a span loses one of its two polarity signals.
pub const DROP_PROB: f64 = 0.3;
/// Ids per polarity head range and in the continuation range.
pub const RANGE: usize = 8;
/// Background pixels are uniform in `[0, NOISE)`.
pub const NOISE: f64 = 0.1;

const MAX_SPANS: usize = 3;
const MAX_SPAN_LEN: usize = 2;
const MIN_LEN: usize = MAX_SPANS * MAX_SPAN_LEN + MAX_SPANS - 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_examples: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Sizes matched to the encoders that will read the corpus.
    pub fn for_encoders(text: &TextEncoderConfig, image: &ImageEncoderConfig, n_examples: usize, seed: u64) -> Self {
        Self {
            n_examples,
            vocab_size: text.vocab_size,
            max_len: text.max_len,
            image_h: image.image_h,
            image_w: image.image_w,
            channels: image.channels,
            patch_size: image.patch_size,
            seed,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < MIN_LEN {
            return Err(Error::Config(format!(
                "max_len {} cannot hold {MAX_SPANS} spans of {MAX_SPAN_LEN} tokens; need at least {MIN_LEN}",
                self.max_len
            )));
        }
        if self.patch_size == 0 || self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}×{} not divisible into {}-pixel patches",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.num_patches() < self.max_len {
            return Err(Error::Config(format!(
                "{} patches cannot mirror {} token positions",
                self.num_patches(),
                self.max_len
            )));
        }
        if self.channels < 3 {
            return Err(Error::Config("synthetic images need at least 3 channels".into()));
        }
        if self.vocab_size <= vocab::FILLER_START {
            return Err(Error::Config(format!(
                "vocab_size {} too small; need more than {}",
                self.vocab_size,
                vocab::FILLER_START
            )));
        }
        Ok(())
    }
}

/// How token ids are partitioned, `RANGE` ids per block:
/// `[POS heads | NEU heads | NEG heads | ambiguous heads | continuation | filler…]`.
pub mod vocab {
    use super::RANGE;
    use crate::mcl::Polarity;

    pub fn head(p: Polarity, j: usize) -> usize {
        p.index() * RANGE + j
    }

    pub fn ambiguous(j: usize) -> usize {
        3 * RANGE + j
    }

    pub fn continuation(j: usize) -> usize {
        4 * RANGE + j
    }

    pub const FILLER_START: usize = 5 * RANGE;

    /// Polarity named by a head token, if it is one.
    pub fn head_polarity(id: usize) -> Option<Polarity> {
        (id < 3 * RANGE).then(|| Polarity::ALL[id / RANGE])
    }

    pub fn is_ambiguous(id: usize) -> bool {
        (3 * RANGE..4 * RANGE).contains(&id)
    }
}

fn paint(img: &mut PatchGrid, p: usize, patch: usize, polarity: Polarity) {
    let per_row = img.w / p;
    let (r0, c0) = ((patch / per_row) * p, (patch % per_row) * p);
    for r in r0..r0 + p {
        for c in c0..c0 + p {
            for ch in 0..img.c {
                img.set(r, c, ch, if ch == polarity.index() { 1.0 } else { 0.0 });
            }
        }
    }
}

fn gen_example(cfg: &SyntheticConfig, rng: &mut Rng) -> MultimodalExample {
    let n_spans = rng.below(1, MAX_SPANS + 1);
    let lens: Vec<usize> = (0..n_spans).map(|_| rng.below(1, MAX_SPAN_LEN + 1)).collect();
    let need = lens.iter().sum::<usize>() + n_spans - 1;
    let n = rng.below(need.max(MIN_LEN / 2), cfg.max_len + 1);

    // Extra O tokens beyond the mandatory single gaps, split into n_spans + 1
    // bins by sorted cut points.
    let free = n - need;
    let mut cuts: Vec<usize> = (0..n_spans).map(|_| rng.below(0, free + 1)).collect();
    cuts.sort_unstable();

    let mut tokens: Vec<usize> = (0..n).map(|_| rng.below(vocab::FILLER_START, cfg.vocab_size)).collect();
    let mut labels = vec![BioLabel::O; n];
    let mut img = PatchGrid::zeros(cfg.image_h, cfg.image_w, cfg.channels);
    for v in img.values.iter_mut() {
        *v = rng.uniform_range(0.0, NOISE);
    }

    let mut pos = 0;
    let mut prev_cut = 0;
    for (s, &len) in lens.iter().enumerate() {
        pos += cuts[s] - prev_cut;
        prev_cut = cuts[s];
        let polarity = Polarity::ALL[rng.below(0, 3)];
        let (mut text_signal, mut image_signal) = (true, true);
        if rng.bernoulli(DROP_PROB) {
            if rng.bernoulli(0.5) {
                text_signal = false;
            } else {
                image_signal = false;
            }
        }
        tokens[pos] = if text_signal {
            vocab::head(polarity, rng.below(0, RANGE))
        } else {
            vocab::ambiguous(rng.below(0, RANGE))
        };
        labels[pos] = BioLabel::begin(polarity);
        for t in pos + 1..pos + len {
            tokens[t] = vocab::continuation(rng.below(0, RANGE));
            labels[t] = BioLabel::inside(polarity);
        }
        if image_signal {
            paint(&mut img, cfg.patch_size, pos, polarity);
        }
        pos += len + 1;
    }
    MultimodalExample {
        tokens,
        labels,
        image: img,
    }
}

/// Deterministic corpus for `cfg.seed`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<MultimodalExample>> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    Ok((0..cfg.n_examples).map(|_| gen_example(cfg, &mut rng)).collect())
}
