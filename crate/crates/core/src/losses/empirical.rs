//! Batch-level losses over two augmented views per sample.
//!
//! For anchor `i` the candidate set `A(i)` is every other view in the batch
//! and `P(i)` the views in `A(i)` carrying the anchor's (noisy) label.

use super::scores::logsumexp_scaled;
use super::{check_beta, check_lambda, LossKind};
use crate::embedding::dot;
use crate::error::{Error, Result};

/// Embeddings of all views in a batch with one label per view.
#[derive(Debug, Clone, PartialEq)]
pub struct SupConBatchView {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl SupConBatchView {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: embeddings.len(), found: labels.len() });
        }
        if embeddings.len() < 2 {
            return Err(Error::invalid("a batch view needs at least two embeddings"));
        }
        let d = embeddings[0].len();
        if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: bad.len() });
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Indices in `P(i)`.
    pub fn positives(&self, anchor: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| j != anchor && self.labels[j] == self.labels[anchor]).collect()
    }
}

/// Value and gradient with respect to every view embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewLoss {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
    /// Anchors that contributed; the value is their mean.
    pub anchors_used: usize,
}

/// Per-anchor value and derivatives on raw inner products `f_i . f_j`,
/// indexed by `j` with the anchor's own slot left at zero.
struct AnchorTerm {
    value: f64,
    d_raw: Vec<f64>,
}

fn raw_products(view: &SupConBatchView, anchor: usize) -> Vec<f64> {
    let e = &view.embeddings[anchor];
    view.embeddings.iter().map(|o| dot(e, o)).collect()
}

/// SupCon-style InfoNCE plus `beta` times the reverse term for one anchor.
/// Candidates in the reverse average are all of `A(i)`, divided by `|A(i)|`.
fn sym_term(raw: &[f64], anchor: usize, pos: &[usize], beta: f64, tau: f64) -> AnchorTerm {
    let n = raw.len();
    let all: Vec<f64> = (0..n).filter(|&j| j != anchor).map(|j| raw[j]).collect();
    let pos_raw: Vec<f64> = pos.iter().map(|&p| raw[p]).collect();
    let lse_all = logsumexp_scaled(&all, tau);
    let np = pos.len() as f64;
    let na = all.len() as f64;

    let info = pos_raw.iter().map(|&s| lse_all - s / tau).sum::<f64>() / np;
    let mut d_raw = vec![0.0; n];
    for j in (0..n).filter(|&j| j != anchor) {
        d_raw[j] = (raw[j] / tau - lse_all).exp() / tau;
    }
    for &p in pos {
        d_raw[p] -= 1.0 / (np * tau);
    }
    if beta == 0.0 {
        return AnchorTerm { value: info, d_raw };
    }

    let lse_pos = logsumexp_scaled(&pos_raw, tau);
    let rev = all.iter().sum::<f64>() / (na * tau) - (lse_pos - np.ln());
    for j in (0..n).filter(|&j| j != anchor) {
        d_raw[j] += beta / (na * tau);
    }
    for &p in pos {
        d_raw[p] -= beta * (raw[p] / tau - lse_pos).exp() / tau;
    }
    AnchorTerm { value: info + beta * rev, d_raw }
}

fn reverse_only_term(raw: &[f64], anchor: usize, pos: &[usize], tau: f64) -> AnchorTerm {
    let n = raw.len();
    let na = (n - 1) as f64;
    let pos_raw: Vec<f64> = pos.iter().map(|&p| raw[p]).collect();
    let lse_pos = logsumexp_scaled(&pos_raw, tau);
    let mean_all = (0..n).filter(|&j| j != anchor).map(|j| raw[j]).sum::<f64>() / (na * tau);
    let mut d_raw = vec![0.0; n];
    for j in (0..n).filter(|&j| j != anchor) {
        d_raw[j] = 1.0 / (na * tau);
    }
    for &p in pos {
        d_raw[p] -= (raw[p] / tau - lse_pos).exp() / tau;
    }
    AnchorTerm { value: mean_all - (lse_pos - (pos.len() as f64).ln()), d_raw }
}

/// Mean over positives of the single-positive RINCE term, with every
/// non-positive view as a negative.
fn rince_term(raw: &[f64], anchor: usize, pos: &[usize], lambda: f64, tau: f64) -> AnchorTerm {
    let n = raw.len();
    let np = pos.len() as f64;
    let mut is_pos = vec![false; n];
    pos.iter().for_each(|&p| is_pos[p] = true);
    let negs: Vec<usize> = (0..n).filter(|&j| j != anchor && !is_pos[j]).collect();
    let neg_sum: f64 = negs.iter().map(|&k| (raw[k] / tau).exp()).sum();
    let mut value = 0.0;
    let mut d_raw = vec![0.0; n];
    for &p in pos {
        let e = (raw[p] / tau).exp();
        value += -(1.0 - lambda) * e + lambda * neg_sum;
        d_raw[p] = -(1.0 - lambda) * e / (tau * np);
    }
    for &k in &negs {
        d_raw[k] = lambda * (raw[k] / tau).exp() / tau;
    }
    AnchorTerm { value: value / np, d_raw }
}

fn anchor_term(view: &SupConBatchView, anchor: usize, kind: LossKind, tau: f64) -> Option<AnchorTerm> {
    let mut pos = view.positives(anchor);
    if pos.is_empty() {
        return None;
    }
    let raw = raw_products(view, anchor);
    Some(match kind {
        LossKind::InfoNce => sym_term(&raw, anchor, &pos, 0.0, tau),
        LossKind::SymNce { beta } => sym_term(&raw, anchor, &pos, beta, tau),
        LossKind::RevNce => reverse_only_term(&raw, anchor, &pos, tau),
        LossKind::Rince { lambda } => rince_term(&raw, anchor, &pos, lambda, tau),
        LossKind::InfoNceNn { threshold } => {
            pos.retain(|&p| raw[p] >= threshold);
            if pos.is_empty() {
                return None;
            }
            sym_term(&raw, anchor, &pos, 0.0, tau)
        }
    })
}

fn scatter(view: &SupConBatchView, anchor: usize, d_raw: &[f64], scale: f64, grads: &mut [Vec<f64>]) {
    let e_i = &view.embeddings[anchor];
    for (j, &c) in d_raw.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let c = c * scale;
        let e_j = &view.embeddings[j];
        for t in 0..e_i.len() {
            grads[anchor][t] += c * e_j[t];
            grads[j][t] += c * e_i[t];
        }
    }
}

/// Empirical SymNCE for a single anchor; `beta = 0` is the SupCon loss.
pub fn empirical_sym_nce(view: &SupConBatchView, anchor: usize, beta: f64, tau: f64) -> Result<ViewLoss> {
    check_beta(beta)?;
    if anchor >= view.len() {
        return Err(Error::invalid(format!("anchor {anchor} outside batch of {}", view.len())));
    }
    let term = anchor_term(view, anchor, LossKind::SymNce { beta }, tau).ok_or(Error::DegenerateAnchor(anchor))?;
    let d = view.embeddings[0].len();
    let mut grads = vec![vec![0.0; d]; view.len()];
    scatter(view, anchor, &term.d_raw, 1.0, &mut grads);
    Ok(ViewLoss { value: term.value, grads, anchors_used: 1 })
}

/// Batch objective: mean of the per-anchor loss over anchors with at least
/// one positive. Returns zero with `anchors_used == 0` when none qualifies.
pub fn supcon_objective(view: &SupConBatchView, kind: LossKind, tau: f64) -> Result<ViewLoss> {
    match kind {
        LossKind::SymNce { beta } => check_beta(beta)?,
        LossKind::Rince { lambda } => check_lambda(lambda)?,
        _ => kind.validate()?,
    }
    let terms: Vec<(usize, AnchorTerm)> =
        (0..view.len()).filter_map(|i| anchor_term(view, i, kind, tau).map(|t| (i, t))).collect();
    let d = view.embeddings[0].len();
    let mut grads = vec![vec![0.0; d]; view.len()];
    if terms.is_empty() {
        return Ok(ViewLoss { value: 0.0, grads, anchors_used: 0 });
    }
    let scale = 1.0 / terms.len() as f64;
    let mut value = 0.0;
    for (i, term) in &terms {
        value += term.value;
        scatter(view, *i, &term.d_raw, scale, &mut grads);
    }
    Ok(ViewLoss { value: value * scale, grads, anchors_used: terms.len() })
}
