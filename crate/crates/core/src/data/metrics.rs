//! Aspect spans and micro-averaged precision/recall/F1.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcl::{BioLabel, Polarity};

/// Inclusive token range with its polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AspectSpan {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
}

/// Decode BIO tags into spans.
///
/// A span opens at `B-X`, or at an `I-X` that does not continue a run of the
/// same polarity, and extends over the following `I-X`. `O` closes it.
pub fn extract_spans(labels: &[BioLabel]) -> Vec<AspectSpan> {
    let mut spans = Vec::new();
    let mut open: Option<AspectSpan> = None;
    for (t, label) in labels.iter().enumerate() {
        match label.polarity() {
            None => spans.extend(open.take()),
            Some(p) => {
                let extends = label.is_inside() && open.is_some_and(|s| s.polarity == p);
                if extends {
                    if let Some(s) = open.as_mut() {
                        s.end = t;
                    }
                } else {
                    spans.extend(open.take());
                    open = Some(AspectSpan {
                        start: t,
                        end: t,
                        polarity: p,
                    });
                }
            }
        }
    }
    spans.extend(open);
    spans
}

/// Canonical BIO tags for non-overlapping spans over `n` tokens.
pub fn spans_to_labels(spans: &[AspectSpan], n: usize) -> Vec<BioLabel> {
    let mut labels = vec![BioLabel::O; n];
    for s in spans {
        labels[s.start] = BioLabel::begin(s.polarity);
        for l in &mut labels[s.start + 1..=s.end] {
            *l = BioLabel::inside(s.polarity);
        }
    }
    labels
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

/// Exact-match span metrics pooled over sentences. Duplicate spans within a
/// sentence count once. With no gold and no predicted spans at all, every
/// score is 1.
pub fn micro_prf(gold: &[Vec<AspectSpan>], pred: &[Vec<AspectSpan>]) -> Result<Metrics> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<_> = g.iter().collect();
        let p: BTreeSet<_> = p.iter().collect();
        tp += g.intersection(&p).count();
        n_pred += p.len();
        n_gold += g.len();
    }
    if n_pred == 0 && n_gold == 0 {
        return Ok(Metrics {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            tp,
            n_pred,
            n_gold,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        tp,
        n_pred,
        n_gold,
    })
}
