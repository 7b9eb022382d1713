//! Central finite-difference checks of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Grads, ParamStore, Rng, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Coordinates checked per parameter; smaller tensors are checked fully.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-6,
            samples: 20,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupSummary {
    pub param: String,
    /// Elements in the parameter tensor.
    pub size: usize,
    pub checked: usize,
    pub max_error: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupSummary>,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_error).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.groups.extend(other.groups);
        self.failures.extend(other.failures);
    }
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Dimension(format!(
            "gradient check needs a scalar, got {:?}",
            value.shape()
        )));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("objective under gradient check".into()));
    }
    Ok(v)
}

/// Compare analytic gradients of `f` against central differences.
///
/// The error for a coordinate is `|analytic − numeric| / max(1, |analytic|)`.
/// `f` must be deterministic in `params`.
pub fn grad_check<F>(f: F, params: &mut ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let gradients = tape.backward(out)?;
    let mut analytic = Grads::zeros_like(params);
    tape.accumulate_param_grads(&gradients, &mut analytic);

    let mut rng = Rng::new(cfg.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let numel = params.get(id).numel();
        let coords: Vec<usize> = if numel <= cfg.samples {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            rng.shuffle(&mut all);
            all.truncate(cfg.samples);
            all.sort_unstable();
            all
        };
        let mut max_error: f64 = 0.0;
        for &i in &coords {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + cfg.step;
            let plus = evaluate(&f, params);
            params.get_mut(id).data_mut()[i] = orig - cfg.step;
            let minus = evaluate(&f, params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let a = analytic.get(id)[i];
            let error = (a - numeric).abs() / a.abs().max(1.0);
            max_error = max_error.max(error);
            if error > cfg.tol {
                report.failures.push(Mismatch {
                    param: params.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    error,
                });
            }
        }
        report.groups.push(GroupSummary {
            param: params.name(id).to_string(),
            size: numel,
            checked: coords.len(),
            max_error,
        });
    }
    Ok(report)
}
