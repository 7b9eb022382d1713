//! Linear-chain CRF over the seven joint tags.
//!
//! A path `y` scores `start[y₁] + Σ emit[t, y_t] + Σ trans[y_{t−1}, y_t] +
//! end[y_n]`. Transitions are unconstrained; nothing masks invalid BIO
//! moves.

use crate::error::{Error, Result};
use crate::mcl::BioLabel;
use crate::nn::{Forward, Init};
use crate::numerics::kernels::log_sum_exp;
use crate::numerics::{ParamId, Tape, Var};

const L: usize = BioLabel::COUNT;

#[derive(Clone, Debug)]
pub struct CrfParams {
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
}

impl CrfParams {
    pub fn new(init: &mut Init, name: &str) -> Self {
        Self {
            transitions: init.zeros(&format!("{name}.transitions"), &[L, L], false),
            start: init.zeros(&format!("{name}.start"), &[L], false),
            end: init.zeros(&format!("{name}.end"), &[L], false),
        }
    }
}

/// Borrowed score tables.
#[derive(Clone, Copy, Debug)]
pub struct CrfScores<'a> {
    pub transitions: &'a [f64],
    pub start: &'a [f64],
    pub end: &'a [f64],
}

impl<'a> CrfScores<'a> {
    pub fn from_tape(tape: &'a Tape, transitions: Var, start: Var, end: Var) -> Self {
        Self {
            transitions: tape.value(transitions).data(),
            start: tape.value(start).data(),
            end: tape.value(end).data(),
        }
    }

    fn trans(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * L + to]
    }

    /// Score of one labeled path.
    pub fn path_score(&self, emissions: &[f64], labels: &[BioLabel]) -> f64 {
        let n = labels.len();
        let mut s = self.start[labels[0].index()] + self.end[labels[n - 1].index()];
        for (t, y) in labels.iter().enumerate() {
            s += emissions[t * L + y.index()];
            if t > 0 {
                s += self.trans(labels[t - 1].index(), y.index());
            }
        }
        s
    }

    /// Forward log-messages `α`, `n × L`.
    fn alphas(&self, emissions: &[f64], n: usize) -> Vec<f64> {
        let mut alpha = vec![0.0; n * L];
        for y in 0..L {
            alpha[y] = self.start[y] + emissions[y];
        }
        let mut buf = [0.0; L];
        for t in 1..n {
            for y in 0..L {
                for (p, b) in buf.iter_mut().enumerate() {
                    *b = alpha[(t - 1) * L + p] + self.trans(p, y);
                }
                alpha[t * L + y] = emissions[t * L + y] + log_sum_exp(&buf);
            }
        }
        alpha
    }

    /// Backward log-messages `β`, `n × L`.
    fn betas(&self, emissions: &[f64], n: usize) -> Vec<f64> {
        let mut beta = vec![0.0; n * L];
        beta[(n - 1) * L..].copy_from_slice(self.end);
        let mut buf = [0.0; L];
        for t in (0..n - 1).rev() {
            for y in 0..L {
                for (nx, b) in buf.iter_mut().enumerate() {
                    *b = self.trans(y, nx) + emissions[(t + 1) * L + nx] + beta[(t + 1) * L + nx];
                }
                beta[t * L + y] = log_sum_exp(&buf);
            }
        }
        beta
    }

    pub fn log_partition(&self, emissions: &[f64]) -> f64 {
        let n = emissions.len() / L;
        let alpha = self.alphas(emissions, n);
        let last: Vec<f64> = (0..L).map(|y| alpha[(n - 1) * L + y] + self.end[y]).collect();
        log_sum_exp(&last)
    }

    /// Max-scoring path. Ties go to the lowest label index, both in the
    /// backpointers and in the final state.
    pub fn viterbi(&self, emissions: &[f64]) -> Result<Vec<BioLabel>> {
        let n = emissions.len() / L;
        if n == 0 {
            return Err(Error::Length("cannot decode an empty sequence".into()));
        }
        let mut delta: Vec<f64> = (0..L).map(|y| self.start[y] + emissions[y]).collect();
        let mut back = vec![0usize; n * L];
        for t in 1..n {
            let mut next = vec![0.0; L];
            for y in 0..L {
                let mut best = 0;
                let mut best_score = delta[0] + self.trans(0, y);
                for p in 1..L {
                    let s = delta[p] + self.trans(p, y);
                    if s > best_score {
                        best = p;
                        best_score = s;
                    }
                }
                back[t * L + y] = best;
                next[y] = best_score + emissions[t * L + y];
            }
            delta = next;
        }
        let finals: Vec<f64> = (0..L).map(|y| delta[y] + self.end[y]).collect();
        let mut y = crate::numerics::kernels::argmax(&finals);
        let mut path = vec![BioLabel::O; n];
        for t in (0..n).rev() {
            path[t] = BioLabel::from_index(y).expect("label index in range");
            y = back[t * L + y];
        }
        Ok(path)
    }

    /// Negative log-likelihood and its gradients with respect to
    /// `(emissions, transitions, start, end)`.
    pub fn nll_with_grads(
        &self,
        emissions: &[f64],
        labels: &[BioLabel],
    ) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = labels.len();
        let alpha = self.alphas(emissions, n);
        let beta = self.betas(emissions, n);
        let last: Vec<f64> = (0..L).map(|y| alpha[(n - 1) * L + y] + self.end[y]).collect();
        let log_z = log_sum_exp(&last);
        let nll = log_z - self.path_score(emissions, labels);

        let mut d_emit = vec![0.0; n * L];
        let mut d_trans = vec![0.0; L * L];
        let mut d_start = vec![0.0; L];
        let mut d_end = vec![0.0; L];
        for t in 0..n {
            for y in 0..L {
                d_emit[t * L + y] = (alpha[t * L + y] + beta[t * L + y] - log_z).exp();
            }
        }
        for t in 1..n {
            for a in 0..L {
                for b in 0..L {
                    let lp = alpha[(t - 1) * L + a] + self.trans(a, b) + emissions[t * L + b] + beta[t * L + b] - log_z;
                    d_trans[a * L + b] += lp.exp();
                }
            }
        }
        d_start.copy_from_slice(&d_emit[..L]);
        d_end.copy_from_slice(&d_emit[(n - 1) * L..]);

        for (t, y) in labels.iter().enumerate() {
            d_emit[t * L + y.index()] -= 1.0;
            if t > 0 {
                d_trans[labels[t - 1].index() * L + y.index()] -= 1.0;
            }
        }
        d_start[labels[0].index()] -= 1.0;
        d_end[labels[n - 1].index()] -= 1.0;
        (nll, d_emit, d_trans, d_start, d_end)
    }
}

fn check_emissions(tape: &Tape, emissions: Var) -> Result<usize> {
    let t = tape.value(emissions);
    if t.cols() != L {
        return Err(Error::Dimension(format!(
            "emissions need {L} columns, got {:?}",
            t.shape()
        )));
    }
    Ok(t.rows())
}

/// `log Z − score(y)` recorded on the tape.
pub fn crf_nll(
    tape: &mut Tape,
    emissions: Var,
    labels: &[BioLabel],
    transitions: Var,
    start: Var,
    end: Var,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Length("CRF likelihood of an empty sequence".into()));
    }
    let n = check_emissions(tape, emissions)?;
    if n != labels.len() {
        return Err(Error::Data(format!("{n} emission rows for {} labels", labels.len())));
    }
    let scores = CrfScores::from_tape(tape, transitions, start, end);
    let (nll, de, dt, ds, dn) = scores.nll_with_grads(tape.value(emissions).data(), labels);
    tape.fused_scalar(nll, vec![(emissions, de), (transitions, dt), (start, ds), (end, dn)])
}

/// Decode the best path for emissions already on the tape.
pub fn crf_viterbi(tape: &Tape, emissions: Var, transitions: Var, start: Var, end: Var) -> Result<Vec<BioLabel>> {
    check_emissions(tape, emissions)?;
    CrfScores::from_tape(tape, transitions, start, end).viterbi(tape.value(emissions).data())
}

impl CrfParams {
    pub fn nll(&self, f: &mut Forward, emissions: Var, labels: &[BioLabel]) -> Result<Var> {
        let (t, s, e) = (f.p(self.transitions), f.p(self.start), f.p(self.end));
        crf_nll(&mut f.tape, emissions, labels, t, s, e)
    }

    pub fn decode(&self, f: &mut Forward, emissions: Var) -> Result<Vec<BioLabel>> {
        let (t, s, e) = (f.p(self.transitions), f.p(self.start), f.p(self.end));
        crf_viterbi(&f.tape, emissions, t, s, e)
    }
}
