//! Multi-task contrastive learning: global InfoNCE between text and image
//! summaries, optimal-transport word-region alignment, and the dual-CRF
//! tagging head.

pub mod crf;
mod gcl;
mod labels;
pub mod ot;
mod tagger;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crf::{crf_nll, crf_viterbi, CrfParams, CrfScores};
pub use gcl::gcl_loss;
pub use labels::{BioLabel, Polarity};
pub use ot::{cost_matrix, ipot, wra_loss, IpotConfig, TransportPlan};
pub use tagger::{TaggerOptions, TaggerOutput, TaggerParams};

/// Where the contrastive and alignment objectives read their features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Standardized encoder outputs.
    Encoder,
    /// Fused text and projected image from the fusion network.
    Paf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MclConfig {
    pub tau_gcl: f64,
    pub ipot: IpotConfig,
    pub gcl_source: FeatureSource,
    pub wra_source: FeatureSource,
    pub use_cls_loss: bool,
}

impl Default for MclConfig {
    fn default() -> Self {
        Self {
            tau_gcl: 0.07,
            ipot: IpotConfig::default(),
            gcl_source: FeatureSource::Encoder,
            wra_source: FeatureSource::Encoder,
            use_cls_loss: true,
        }
    }
}

impl MclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_gcl > 0.0) {
            return Err(Error::Config("mcl.tau_gcl must be positive".into()));
        }
        if !(self.ipot.beta > 0.0) || self.ipot.outer_iters == 0 || self.ipot.inner_iters == 0 {
            return Err(Error::Config(
                "mcl.ipot needs beta > 0 and positive iteration counts".into(),
            ));
        }
        Ok(())
    }
}
