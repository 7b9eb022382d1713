//! Adaptive multi-loss aggregation.
//!
//! Each of the four task losses gets an uncertainty `σᵢ = exp(ρᵢ)` (learned)
//! and a priority `πᵢ` (an exponential moving average of the loss relative
//! to its first observed value, not learned). Priorities go through a
//! tempered softmax and are blended with uniform weights:
//!
//! ```text
//! ŵᵢ = (1 − α)/M + α · softmax(π/τ)ᵢ
//! L  = Σᵢ ŵᵢ · (Lᵢ / (2σᵢ²) + log σᵢ)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, ParamId, Tape, Tensor, Var};

/// Number of aggregated tasks.
pub const M: usize = 4;

pub const TASK_NAMES: [&str; M] = ["l_crf", "l_cls", "l_gcl", "l_wra"];

const RATIO_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityMode {
    Ema,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmaConfig {
    pub alpha: f64,
    pub tau: f64,
    pub pi_ema_decay: f64,
    pub priority_mode: PriorityMode,
}

impl Default for AmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 1.0,
            pi_ema_decay: 0.9,
            priority_mode: PriorityMode::Ema,
        }
    }
}

impl AmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("ama.alpha must lie in [0, 1]".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("ama.tau must be positive".into()));
        }
        if !(self.pi_ema_decay > 0.0 && self.pi_ema_decay < 1.0) {
            return Err(Error::Config("ama.pi_ema_decay must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-task scalar losses in aggregation order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_crf: f64,
    pub l_cls: f64,
    pub l_gcl: f64,
    pub l_wra: f64,
}

impl LossBundle {
    pub fn to_array(self) -> [f64; M] {
        [self.l_crf, self.l_cls, self.l_gcl, self.l_wra]
    }

    pub fn from_array(a: [f64; M]) -> Self {
        Self {
            l_crf: a[0],
            l_cls: a[1],
            l_gcl: a[2],
            l_wra: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Non-gradient part of the aggregation state. The log-uncertainties `ρ`
/// live in the parameter store under [`AmaState::rho`].
#[derive(Clone, Debug, PartialEq)]
pub struct AmaState {
    pub cfg: AmaConfig,
    pub rho: ParamId,
    pub pi: [f64; M],
    pub initial_losses: Option<[f64; M]>,
}

/// `ŵ = (1 − α)/M + α·softmax(π/τ)`.
pub fn priority_weights(pi: &[f64; M], alpha: f64, tau: f64) -> Result<[f64; M]> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!(
            "priority temperature must be positive, got {tau}"
        )));
    }
    let scaled: Vec<f64> = pi.iter().map(|p| p / tau).collect();
    let omega = kernels::softmax_rows(&scaled, M);
    let mut w = [0.0; M];
    for (wi, oi) in w.iter_mut().zip(&omega) {
        *wi = (1.0 - alpha) / M as f64 + alpha * oi;
    }
    Ok(w)
}

/// `Σᵢ ŵᵢ·(Lᵢ·exp(−2ρᵢ)/2 + ρᵢ)` over the tasks marked active.
///
/// Inactive tasks contribute nothing, not even their `log σ` term, which
/// would otherwise be driven to −∞ by a loss that is identically zero.
pub fn aggregate_loss(
    tape: &mut Tape,
    losses: [Var; M],
    active: [bool; M],
    rho: Var,
    weights: &[f64; M],
) -> Result<Var> {
    for (i, &l) in losses.iter().enumerate() {
        if !tape.value(l).is_finite() {
            return Err(Error::Data(format!("{} is not finite", TASK_NAMES[i])));
        }
    }
    if tape.value(rho).numel() != M {
        return Err(Error::Dimension(format!("expected {M} log-uncertainties")));
    }
    let stacked = tape.stack(&losses)?;
    let inv_var = tape.affine(rho, -2.0, 0.0);
    let inv_var = tape.exp(inv_var);
    let scaled = tape.mul(stacked, inv_var)?;
    let scaled = tape.scale(scaled, 0.5);
    let terms = tape.add(scaled, rho)?;
    let masked: Vec<f64> = weights
        .iter()
        .zip(active)
        .map(|(w, a)| if a { *w } else { 0.0 })
        .collect();
    let w = tape.constant(Tensor::from_parts(vec![M], masked));
    let weighted = tape.mul(terms, w)?;
    Ok(tape.sum(weighted))
}

/// Plain sum of the active losses.
pub fn sum_losses(tape: &mut Tape, losses: [Var; M], active: [bool; M]) -> Result<Var> {
    let picked: Vec<Var> = losses.iter().zip(active).filter_map(|(l, a)| a.then_some(*l)).collect();
    let stacked = tape.stack(&picked)?;
    Ok(tape.sum(stacked))
}

impl AmaState {
    pub fn new(cfg: AmaConfig, rho: ParamId) -> Self {
        Self {
            cfg,
            rho,
            pi: [0.0; M],
            initial_losses: None,
        }
    }

    pub fn weights(&self) -> Result<[f64; M]> {
        priority_weights(&self.pi, self.cfg.alpha, self.cfg.tau)
    }

    /// EMA of each loss relative to its first observed value.
    pub fn update_priorities(&mut self, bundle: &LossBundle) {
        if self.cfg.priority_mode == PriorityMode::Frozen {
            return;
        }
        let losses = bundle.to_array();
        let initial = *self.initial_losses.get_or_insert(losses);
        let decay = self.cfg.pi_ema_decay;
        for i in 0..M {
            let ratio = losses[i] / initial[i].max(RATIO_EPS);
            self.pi[i] = decay * self.pi[i] + (1.0 - decay) * ratio;
        }
    }
}

/// `σ = exp(ρ)`
pub fn sigmas(rho: &Tensor) -> [f64; M] {
    let mut s = [0.0; M];
    for (o, r) in s.iter_mut().zip(rho.data()) {
        *o = r.exp();
    }
    s
}
