//! Word-region alignment by optimal transport.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Relative slack under which two plan entries count as tied.
const TIE_RTOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpotConfig {
    pub beta: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
}

impl Default for IpotConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            outer_iters: 300,
            inner_iters: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// Soft plan `T`, `n × k`, total mass 1.
    pub plan: Tensor,
    /// Row-wise argmax of `T`.
    pub matching: Vec<usize>,
    /// `⟨T, C⟩`
    pub objective: f64,
}

impl TransportPlan {
    /// Largest deviation of a row sum from `1/n` or a column sum from `1/k`.
    pub fn marginal_violation(&self) -> f64 {
        let (n, k) = (self.plan.rows(), self.plan.cols());
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let s: f64 = self.plan.row(i).iter().sum();
            worst = worst.max((s - 1.0 / n as f64).abs());
        }
        for j in 0..k {
            let s: f64 = (0..n).map(|i| self.plan.at(i, j)).sum();
            worst = worst.max((s - 1.0 / k as f64).abs());
        }
        worst
    }
}

/// Cosine distances `C_ij = 1 − cos(x_i, p_j)`.
pub fn cost_matrix(tape: &mut Tape, tokens: Var, patches: Var) -> Result<Var> {
    if tape.value(tokens).cols() != tape.value(patches).cols() {
        return Err(Error::Dimension(format!(
            "token width {:?} vs patch width {:?}",
            tape.shape(tokens),
            tape.shape(patches)
        )));
    }
    let x = tape.l2_normalize_rows(tokens);
    let p = tape.l2_normalize_rows(patches);
    let cos = tape.matmul_bt(x, p)?;
    Ok(tape.affine(cos, -1.0, 1.0))
}

/// Row argmax with near-ties resolved toward the lowest column.
pub fn harden(plan: &Tensor) -> Vec<usize> {
    (0..plan.rows())
        .map(|i| {
            let row = plan.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&v| v >= max - TIE_RTOL * max.abs()).unwrap_or(0)
        })
        .collect()
}

/// Proximal-point optimal transport with uniform marginals.
///
/// Each outer step reweights the kernel `exp(−C/β)` by the current plan and
/// rescales it toward the marginals with `inner_iters` Sinkhorn sweeps.
pub fn ipot(cost: &Tensor, cfg: &IpotConfig) -> Result<TransportPlan> {
    if !(cfg.beta > 0.0 && cfg.beta.is_finite()) {
        return Err(Error::Parameter(format!(
            "IPOT beta must be positive, got {}",
            cfg.beta
        )));
    }
    if cfg.outer_iters == 0 || cfg.inner_iters == 0 {
        return Err(Error::Parameter("IPOT iteration counts must be positive".into()));
    }
    if !cost.is_finite() {
        return Err(Error::Data("non-finite transport cost".into()));
    }
    let (n, k) = (cost.rows(), cost.cols());
    let mu = 1.0 / n as f64;
    let nu = 1.0 / k as f64;
    let kernel: Vec<f64> = cost.data().iter().map(|c| (-c / cfg.beta).exp()).collect();
    let mut plan = vec![1.0 / (n * k) as f64; n * k];
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; k];
    let mut q = vec![0.0; n * k];

    for _ in 0..cfg.outer_iters {
        for ((qv, kv), tv) in q.iter_mut().zip(&kernel).zip(&plan) {
            *qv = kv * tv;
        }
        for _ in 0..cfg.inner_iters {
            for i in 0..n {
                let s: f64 = (0..k).map(|j| q[i * k + j] * b[j]).sum();
                a[i] = mu / s;
            }
            for j in 0..k {
                let s: f64 = (0..n).map(|i| q[i * k + j] * a[i]).sum();
                b[j] = nu / s;
            }
        }
        for i in 0..n {
            for j in 0..k {
                plan[i * k + j] = a[i] * q[i * k + j] * b[j];
            }
        }
    }

    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("IPOT plan underflowed; increase beta".into()));
    }
    let plan = Tensor::new(vec![n, k], plan)?;
    let objective = plan.data().iter().zip(cost.data()).map(|(t, c)| t * c).sum();
    let matching = harden(&plan);
    Ok(TransportPlan {
        plan,
        matching,
        objective,
    })
}

/// Alignment loss `Σᵢ C[i, m(i)]` over the hardened matching.
///
/// The plan is treated as a constant; gradient flows through `C` only.
pub fn wra_loss(tape: &mut Tape, tokens: Var, patches: Var, cfg: &IpotConfig) -> Result<(Var, TransportPlan)> {
    let cost = cost_matrix(tape, tokens, patches)?;
    let plan = ipot(tape.value(cost), cfg)?;
    let picked = tape.pick(cost, &plan.matching)?;
    Ok((tape.sum(picked), plan))
}
