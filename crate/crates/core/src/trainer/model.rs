use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ama::{aggregate_loss, sum_losses, AmaConfig, AmaState, LossBundle, M, TASK_NAMES};
use crate::data::MultimodalExample;
use crate::encoders::{ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::mcl::{
    gcl_loss, wra_loss, BioLabel, FeatureSource, MclConfig, TaggerOptions, TaggerOutput, TaggerParams, TransportPlan,
};
use crate::nn::{Forward, Init};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor, Var};
use crate::paf::{PafConfig, PafOutput, PafParams};

/// Stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0;

/// Architecture and objective hyperparameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub paf: PafConfig,
    pub mcl: MclConfig,
    pub ama: AmaConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.image.validate()?;
        self.paf.validate()?;
        self.mcl.validate()?;
        self.ama.validate()?;
        if self.text.d_model != self.image.d_model {
            return Err(Error::Config(format!(
                "text.d_model {} and image.d_model {} must agree",
                self.text.d_model, self.image.d_model
            )));
        }
        let k1 = self.image.num_patches() + 1;
        if self.paf.l_max < self.text.max_len || self.paf.l_max < k1 {
            return Err(Error::Config(format!(
                "paf.l_max {} must cover text.max_len {} and {} image rows",
                self.paf.l_max, self.text.max_len, k1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Skip the fusion stages; the tagger reads the projected text.
    NoPaf,
    /// Drop the contrastive and alignment losses and the text-only CRF.
    NoMcl,
    /// Replace the adaptive aggregation by a plain sum.
    NoAma,
}

/// Forward-pass switches derived from the ablation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switches {
    pub fuse: bool,
    pub mcl: bool,
    pub ama: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::from_ablation(&BTreeSet::new())
    }
}

impl Switches {
    pub fn from_ablation(ablation: &BTreeSet<Ablation>) -> Self {
        Self {
            fuse: !ablation.contains(&Ablation::NoPaf),
            mcl: !ablation.contains(&Ablation::NoMcl),
            ama: !ablation.contains(&Ablation::NoAma),
        }
    }
}

/// Module structure over a parameter store.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub switches: Switches,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub paf: PafParams,
    pub tagger: TaggerParams,
    pub rho: ParamId,
}

/// Everything recorded for one example.
pub struct ExampleTrace {
    pub text: Var,
    pub image: Var,
    pub paf: PafOutput,
    pub tagger: TaggerOutput,
    pub wra: Option<(Var, TransportPlan)>,
}

/// Batch-level loss nodes, in aggregation order.
pub struct BatchTrace {
    pub losses: [Var; M],
    pub active: [bool; M],
    pub examples: Vec<ExampleTrace>,
}

impl BatchTrace {
    pub fn decoded(&self) -> Vec<Vec<BioLabel>> {
        self.examples.iter().map(|e| e.tagger.decoded.clone()).collect()
    }
}

impl Network {
    fn tagger_options(&self) -> TaggerOptions {
        TaggerOptions {
            dual_crf: self.switches.mcl,
        }
    }

    fn active(&self) -> [bool; M] {
        let mcl = self.switches.mcl;
        [true, self.cfg.mcl.use_cls_loss, mcl, mcl]
    }

    /// Encoders, fusion and tagger for one example. With `labels` the
    /// tagging losses and, if alignment is on, the WRA term are recorded.
    pub fn forward_example(&self, f: &mut Forward, ex: &MultimodalExample, with_losses: bool) -> Result<ExampleTrace> {
        let text = self.text.forward(f, &ex.tokens)?;
        let image = self.image.forward(f, &ex.image)?;
        let paf = self.paf.forward(f, text, image, self.switches.fuse)?;
        let labels = with_losses.then_some(ex.labels.as_slice());
        let tagger = self.tagger.forward(f, paf.fused, text, labels, self.tagger_options())?;
        let wra = if with_losses && self.switches.mcl {
            let (tokens, rows) = match self.cfg.mcl.wra_source {
                FeatureSource::Encoder => (text, image),
                FeatureSource::Paf => (paf.fused, paf.image_proj),
            };
            let k = f.tape.value(rows).rows() - 1;
            let patches = f.tape.slice_rows(rows, 1, k)?;
            Some(wra_loss(&mut f.tape, tokens, patches, &self.cfg.mcl.ipot)?)
        } else {
            None
        };
        Ok(ExampleTrace {
            text,
            image,
            paf,
            tagger,
            wra,
        })
    }

    /// Per-task losses for a batch: batch means of the per-example terms and
    /// a single contrastive term over the batch's global vectors.
    pub fn forward_batch(&self, f: &mut Forward, batch: &[&MultimodalExample]) -> Result<BatchTrace> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut examples = Vec::with_capacity(batch.len());
        for ex in batch {
            examples.push(self.forward_example(f, ex, true)?);
        }
        let active = self.active();
        let zero = f.input(Tensor::scalar(0.0));
        let mean_of = |f: &mut Forward, vars: Vec<Var>| -> Result<Var> {
            let s = f.tape.stack(&vars)?;
            Ok(f.tape.mean(s))
        };
        let l_crf = mean_of(
            f,
            examples.iter().map(|e| e.tagger.l_crf.expect("labels given")).collect(),
        )?;
        let l_cls = if active[1] {
            mean_of(
                f,
                examples.iter().map(|e| e.tagger.l_cls.expect("labels given")).collect(),
            )?
        } else {
            zero
        };
        let (l_gcl, l_wra) = if self.switches.mcl {
            let mut text_rows = Vec::with_capacity(batch.len());
            let mut image_rows = Vec::with_capacity(batch.len());
            for e in &examples {
                let (t, v) = match self.cfg.mcl.gcl_source {
                    FeatureSource::Encoder => (e.text, e.image),
                    FeatureSource::Paf => (e.paf.fused, e.paf.image_proj),
                };
                text_rows.push(f.tape.slice_rows(t, 0, 1)?);
                image_rows.push(f.tape.slice_rows(v, 0, 1)?);
            }
            let t = f.tape.concat_rows(&text_rows)?;
            let v = f.tape.concat_rows(&image_rows)?;
            let gcl = gcl_loss(&mut f.tape, t, v, self.cfg.mcl.tau_gcl)?;
            let wra = mean_of(
                f,
                examples
                    .iter()
                    .map(|e| e.wra.as_ref().expect("alignment on").0)
                    .collect(),
            )?;
            (gcl, wra)
        } else {
            (zero, zero)
        };
        let losses = [l_crf, l_cls, l_gcl, l_wra];
        for (i, &l) in losses.iter().enumerate() {
            if !f.tape.value(l).is_finite() {
                return Err(Error::NonFinite(format!("loss term {} diverged", TASK_NAMES[i])));
            }
        }
        Ok(BatchTrace {
            losses,
            active,
            examples,
        })
    }

    /// Scalar training objective from a batch trace.
    pub fn total_loss(&self, f: &mut Forward, trace: &BatchTrace, weights: &[f64; M]) -> Result<Var> {
        if self.switches.ama {
            let rho = f.p(self.rho);
            aggregate_loss(&mut f.tape, trace.losses, trace.active, rho, weights)
        } else {
            sum_losses(&mut f.tape, trace.losses, trace.active)
        }
    }

    /// Eval-mode decode of the fused head.
    pub fn predict_one(&self, params: &ParamStore, ex: &MultimodalExample) -> Result<Vec<BioLabel>> {
        let mut f = Forward::eval(params);
        let trace = self.forward_example(&mut f, ex, false)?;
        Ok(trace.tagger.decoded)
    }
}

/// Parameters, structure and aggregation state.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore,
    pub ama: AmaState,
}

impl Model {
    /// Fresh parameters drawn from `Rng::stream(seed, INIT_STREAM)`.
    pub fn new(cfg: &ModelConfig, switches: Switches, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::stream(seed, INIT_STREAM);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let text = TextEncoder::new(&mut init, &cfg.text)?;
        let image = ImageEncoder::new(&mut init, &cfg.image)?;
        let paf = PafParams::new(&mut init, &cfg.paf, cfg.text.d_model)?;
        let tagger = TaggerParams::new(&mut init, cfg.text.d_model, cfg.paf.d_hidden);
        let rho = init.zeros("ama.rho", &[M], false);
        let net = Network {
            cfg: cfg.clone(),
            switches,
            text,
            image,
            paf,
            tagger,
            rho,
        };
        let ama = AmaState::new(cfg.ama.clone(), rho);
        Ok(Self { net, params, ama })
    }

    pub fn predict(&self, data: &[MultimodalExample]) -> Result<Vec<Vec<BioLabel>>> {
        data.iter().map(|ex| self.net.predict_one(&self.params, ex)).collect()
    }

    /// Per-task loss values for a batch in eval mode (no dropout).
    pub fn eval_losses(&self, batch: &[&MultimodalExample]) -> Result<LossBundle> {
        let mut f = Forward::eval(&self.params);
        let trace = self.net.forward_batch(&mut f, batch)?;
        Ok(bundle_of(&f, &trace))
    }
}

pub(crate) fn bundle_of(f: &Forward, trace: &BatchTrace) -> LossBundle {
    LossBundle::from_array(trace.losses.map(|l| f.tape.value(l).item()))
}
