//! Optimization loop: batched forward through encoders, fusion and the
//! tagging head, adaptive loss aggregation, AdamW updates and evaluation.

mod adamw;
mod model;

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ama::{sigmas, LossBundle, M};
use crate::data::{extract_spans, micro_prf, Metrics, MultimodalExample};
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::numerics::{Grads, Rng};

pub use adamw::{clip_global_norm, AdamW};
pub use model::{Ablation, BatchTrace, ExampleTrace, Model, ModelConfig, Network, Switches, INIT_STREAM};

const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = 2 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: BTreeSet<Ablation>,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            ablation: BTreeSet::new(),
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be finite and non-negative".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(
                "train.weight_decay must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("train.betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("train.eps must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn switches(&self) -> Switches {
        Switches::from_ablation(&self.ablation)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-task losses over the epoch's steps.
    pub losses: LossBundle,
    /// Mean aggregated objective over the epoch's steps.
    pub total: f64,
    /// Task weights `ŵ` after the epoch.
    pub weights: [f64; M],
    /// Uncertainties `σ` after the epoch.
    pub sigmas: [f64; M],
    pub dev_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

/// Values observed during one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBundle,
    pub total: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps);
        Ok(Self {
            model,
            cfg,
            opt,
            epoch: 0,
        })
    }

    /// Loss, gradients and the objective value for one batch.
    pub fn gradients(&self, batch: &[&MultimodalExample], rng: Rng) -> Result<(StepOutcome, Grads)> {
        let model = &self.model;
        let mut f = Forward::new(&model.params, true, rng);
        let trace = model.net.forward_batch(&mut f, batch)?;
        let weights = model.ama.weights()?;
        let total = model.net.total_loss(&mut f, &trace, &weights)?;
        let grads_out = f.tape.backward(total)?;
        let mut grads = Grads::zeros_like(&model.params);
        f.tape.accumulate_param_grads(&grads_out, &mut grads);
        let losses = model::bundle_of(&f, &trace);
        let total = f.tape.value(total).item();
        Ok((
            StepOutcome {
                losses,
                total,
                grad_norm: grads.global_norm(),
            },
            grads,
        ))
    }

    /// Forward, backward, clip, update, then refresh the task priorities.
    pub fn step(&mut self, batch: &[&MultimodalExample]) -> Result<StepOutcome> {
        let rng = Rng::stream(self.cfg.seed, DROPOUT_STREAM + self.opt.steps());
        let (outcome, mut grads) = self.gradients(batch, rng)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at step {} (losses {:?})",
                self.opt.steps(),
                outcome.losses
            )));
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        self.opt.step(&mut self.model.params, &grads);
        self.model.ama.update_priorities(&outcome.losses);
        Ok(outcome)
    }

    /// One pass over `train` in a seed-determined order.
    pub fn run_epoch(&mut self, train: &[MultimodalExample], dev: Option<&[MultimodalExample]>) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::stream(self.cfg.seed, SHUFFLE_STREAM + self.epoch as u64).shuffle(&mut order);
        let mut sum = [0.0; M];
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&MultimodalExample> = chunk.iter().map(|&i| &train[i]).collect();
            let out = self.step(&batch).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {}: {msg}", self.epoch)),
                other => other,
            })?;
            for (s, l) in sum.iter_mut().zip(out.losses.to_array()) {
                *s += l;
            }
            total += out.total;
            steps += 1;
        }
        let dev_f1 = match dev {
            Some(d) if !d.is_empty() => Some(evaluate(&self.model, d)?.f1),
            _ => None,
        };
        let record = EpochRecord {
            epoch: self.epoch,
            losses: LossBundle::from_array(sum.map(|s| s / steps as f64)),
            total: total / steps as f64,
            weights: self.model.ama.weights()?,
            sigmas: sigmas(self.model.params.get(self.model.ama.rho)),
            dev_f1,
        };
        self.epoch += 1;
        Ok(record)
    }
}

/// Train for `cfg.epochs` epochs, writing one JSON object per epoch to `log`.
pub fn train(
    model: Model,
    cfg: &TrainConfig,
    train: &[MultimodalExample],
    dev: Option<&[MultimodalExample]>,
    mut log: Option<&mut dyn Write>,
) -> Result<(Model, TrainReport)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        let record = trainer.run_epoch(train, dev)?;
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        report.epochs.push(record);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((trainer.model, report))
}

/// Eval-mode decoding, span extraction and micro P/R/F1 against gold.
pub fn evaluate(model: &Model, data: &[MultimodalExample]) -> Result<Metrics> {
    let predicted = model.predict(data)?;
    score(data, &predicted)
}

/// Micro P/R/F1 of label sequences against a dataset's gold labels.
pub fn score(data: &[MultimodalExample], predicted: &[Vec<crate::mcl::BioLabel>]) -> Result<Metrics> {
    let gold: Vec<_> = data.iter().map(|ex| extract_spans(&ex.labels)).collect();
    let pred: Vec<_> = predicted.iter().map(|p| extract_spans(p)).collect();
    micro_prf(&gold, &pred)
}
