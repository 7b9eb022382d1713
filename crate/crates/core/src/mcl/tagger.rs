use crate::error::{Error, Result};
use crate::mcl::crf::CrfParams;
use crate::mcl::BioLabel;
use crate::nn::{Forward, Init, Linear};
use crate::numerics::Var;

/// Dual-classifier CRF head with the text residual into the fused branch.
#[derive(Clone, Debug)]
pub struct TaggerParams {
    pub classifier_fused: Linear,
    pub classifier_text: Linear,
    pub residual: Linear,
    pub crf0: CrfParams,
    pub crf1: CrfParams,
}

#[derive(Clone, Copy, Debug)]
pub struct TaggerOptions {
    /// Include the text-only CRF in `l_crf`.
    pub dual_crf: bool,
}

impl Default for TaggerOptions {
    fn default() -> Self {
        Self { dual_crf: true }
    }
}

#[derive(Clone, Debug)]
pub struct TaggerOutput {
    pub l_crf: Option<Var>,
    pub l_cls: Option<Var>,
    /// Fused-branch emissions `u⁰`.
    pub emissions: Var,
    pub decoded: Vec<BioLabel>,
}

impl TaggerParams {
    pub fn new(init: &mut Init, d_model: usize, d_hidden: usize) -> Self {
        let k = BioLabel::COUNT;
        Self {
            classifier_fused: Linear::new(init, "tagger.classifier_fused", d_hidden, k, true),
            classifier_text: Linear::new(init, "tagger.classifier_text", d_model, k, true),
            residual: Linear::new(init, "tagger.residual", d_model, d_hidden, false),
            crf0: CrfParams::new(init, "tagger.crf0"),
            crf1: CrfParams::new(init, "tagger.crf1"),
        }
    }

    /// `h̃ = h_paf + h_text·W_r`; `u⁰`, `u¹` from the two classifiers;
    /// `l_crf` sums the CRF likelihoods, `l_cls` is token cross-entropy on
    /// `u⁰`. Losses are computed only when `labels` are given.
    pub fn forward(
        &self,
        f: &mut Forward,
        h_paf: Var,
        h_text: Var,
        labels: Option<&[BioLabel]>,
        opts: TaggerOptions,
    ) -> Result<TaggerOutput> {
        let n = f.tape.value(h_paf).rows();
        if f.tape.value(h_text).rows() != n {
            return Err(Error::Data(format!(
                "fused features have {n} rows, text features {}",
                f.tape.value(h_text).rows()
            )));
        }
        if let Some(y) = labels {
            if y.len() != n {
                return Err(Error::Data(format!("{n} tokens but {} labels", y.len())));
            }
        }
        let mixed = self.residual.forward(f, h_text)?;
        let mixed = f.tape.add(h_paf, mixed)?;
        let u0 = self.classifier_fused.forward(f, mixed)?;
        let decoded = self.crf0.decode(f, u0)?;

        let (l_crf, l_cls) = match labels {
            Some(y) => {
                let mut l_crf = self.crf0.nll(f, u0, y)?;
                if opts.dual_crf {
                    let u1 = self.classifier_text.forward(f, h_text)?;
                    let l1 = self.crf1.nll(f, u1, y)?;
                    l_crf = f.tape.add(l_crf, l1)?;
                }
                let targets: Vec<usize> = y.iter().map(|l| l.index()).collect();
                let l_cls = f.tape.cross_entropy(u0, &targets)?;
                (Some(l_crf), Some(l_cls))
            }
            None => (None, None),
        };
        Ok(TaggerOutput {
            l_crf,
            l_cls,
            emissions: u0,
            decoded,
        })
    }
}
