//! Contrastive losses with embedding gradients.
//!
//! All losses are evaluated on one anchor, `M` positives and `K` negatives
//! with exponents `f(x)^T f(x') / tau`. Log-sum-exp terms are max-shifted.
//! RINCE keeps its bare exponentials; with unit embeddings and `tau >= 0.05`
//! the exponents stay below 20.

pub mod empirical;
pub mod scores;

use serde::{Deserialize, Serialize};

use crate::embedding::dot;
use crate::error::{Error, Result};

pub use empirical::{empirical_sym_nce, supcon_objective, SupConBatchView, ViewLoss};
pub use scores::ScoreGrad;

/// Anchor, positives and negatives sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(anchor: Vec<f64>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::invalid("a batch needs at least one positive and one negative"));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(format!("temperature {temperature} must be positive")));
        }
        let d = anchor.len();
        if let Some(bad) = positives.iter().chain(&negatives).find(|v| v.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: bad.len() });
        }
        Ok(Self { anchor, positives, negatives, temperature })
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.len()
    }

    /// Raw inner products of the anchor with positives and negatives.
    pub fn inner_products(&self) -> (Vec<f64>, Vec<f64>) {
        let pos = self.positives.iter().map(|p| dot(&self.anchor, p)).collect();
        let neg = self.negatives.iter().map(|n| dot(&self.anchor, n)).collect();
        (pos, neg)
    }

    /// Applies the chain rule `s = a . b` to derivatives on inner products.
    fn backprop(&self, g: ScoreGrad) -> LossOutput {
        let d = self.anchor.len();
        let mut anchor = vec![0.0; d];
        let mut push = |coef: f64, other: &[f64]| -> Vec<f64> {
            for (a, o) in anchor.iter_mut().zip(other) {
                *a += coef * o;
            }
            self.anchor.iter().map(|a| coef * a).collect()
        };
        let positives = g.d_pos.iter().zip(&self.positives).map(|(&c, p)| push(c, p)).collect();
        let negatives = g.d_neg.iter().zip(&self.negatives).map(|(&c, n)| push(c, n)).collect();
        LossOutput { value: g.value, anchor, positives, negatives }
    }
}

/// Loss value with gradients for every embedding in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl LossOutput {
    fn zeros_like(batch: &ContrastiveBatch) -> Self {
        let d = batch.anchor.len();
        Self {
            value: 0.0,
            anchor: vec![0.0; d],
            positives: vec![vec![0.0; d]; batch.positives.len()],
            negatives: vec![vec![0.0; d]; batch.negatives.len()],
        }
    }

    /// `self + weight * other`, gradients included.
    fn add_scaled(mut self, other: &LossOutput, weight: f64) -> Self {
        self.value += weight * other.value;
        let axpy = |dst: &mut Vec<f64>, src: &Vec<f64>| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += weight * s;
            }
        };
        axpy(&mut self.anchor, &other.anchor);
        self.positives.iter_mut().zip(&other.positives).for_each(|(d, s)| axpy(d, s));
        self.negatives.iter_mut().zip(&other.negatives).for_each(|(d, s)| axpy(d, s));
        self
    }

    /// All gradients flattened as anchor, positives, negatives.
    pub fn flat_gradient(&self) -> Vec<f64> {
        let mut out = self.anchor.clone();
        self.positives.iter().chain(&self.negatives).for_each(|v| out.extend_from_slice(v));
        out
    }
}

pub fn info_nce(batch: &ContrastiveBatch) -> LossOutput {
    let (pos, neg) = batch.inner_products();
    batch.backprop(scores::info_nce_grad(&pos, &neg, batch.temperature))
}

/// Reverse InfoNCE. Unlike InfoNCE it can be negative.
pub fn rev_nce(batch: &ContrastiveBatch) -> LossOutput {
    let (pos, neg) = batch.inner_products();
    batch.backprop(scores::rev_nce_grad(&pos, &neg, batch.temperature))
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1]")));
    }
    Ok(())
}

/// `info_nce + beta * rev_nce`.
pub fn sym_nce(batch: &ContrastiveBatch, beta: f64) -> Result<LossOutput> {
    check_beta(beta)?;
    Ok(info_nce(batch).add_scaled(&rev_nce(batch), beta))
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda {lambda} must be positive")));
    }
    Ok(())
}

/// The robust density-weighted loss `-(1-lambda) e^{s+} + lambda sum_k e^{s_k}`.
pub fn rince(batch: &ContrastiveBatch, lambda: f64) -> Result<LossOutput> {
    if batch.num_positives() != 1 {
        return Err(Error::invalid(format!("rince takes exactly one positive, got {}", batch.num_positives())));
    }
    check_lambda(lambda)?;
    let (pos, neg) = batch.inner_products();
    Ok(batch.backprop(scores::rince_grad(pos[0], &neg, lambda, batch.temperature)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnOutput {
    pub output: LossOutput,
    /// Number of positives inside the neighbour set.
    pub kept: usize,
    /// Set when no positive reaches the threshold; the output is then zero.
    pub empty: bool,
}

/// InfoNCE restricted to positives with `f(x)^T f(x+) >= threshold` on raw
/// inner products. Positives outside the set receive zero gradient.
pub fn info_nce_nn(batch: &ContrastiveBatch, threshold: f64) -> NnOutput {
    let (pos, neg) = batch.inner_products();
    let kept_idx: Vec<usize> = (0..pos.len()).filter(|&m| pos[m] >= threshold).collect();
    if kept_idx.is_empty() {
        return NnOutput { output: LossOutput::zeros_like(batch), kept: 0, empty: true };
    }
    let kept_pos: Vec<f64> = kept_idx.iter().map(|&m| pos[m]).collect();
    let g = scores::info_nce_grad(&kept_pos, &neg, batch.temperature);
    let mut d_pos = vec![0.0; pos.len()];
    for (&m, &dv) in kept_idx.iter().zip(&g.d_pos) {
        d_pos[m] = dv;
    }
    let output = batch.backprop(ScoreGrad { value: g.value, d_pos, d_neg: g.d_neg });
    NnOutput { output, kept: kept_idx.len(), empty: false }
}

/// A loss together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum LossKind {
    InfoNce,
    RevNce,
    SymNce { beta: f64 },
    Rince { lambda: f64 },
    InfoNceNn { threshold: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::SymNce { beta } => check_beta(beta),
            LossKind::Rince { lambda } => check_lambda(lambda),
            LossKind::InfoNceNn { threshold } if threshold.is_nan() => Err(Error::invalid("threshold is NaN")),
            _ => Ok(()),
        }
    }

    /// Short identifier used in reports and CSV rows.
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::RevNce => "revnce",
            LossKind::SymNce { beta } if *beta == 0.0 => "supcon",
            LossKind::SymNce { .. } => "symnce",
            LossKind::Rince { .. } => "rince",
            LossKind::InfoNceNn { .. } => "infonce-nn",
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match *self {
            LossKind::SymNce { beta } => Some(beta),
            _ => None,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            LossKind::Rince { lambda } => Some(lambda),
            _ => None,
        }
    }

    /// Whether the loss needs exactly one positive.
    pub fn single_positive(&self) -> bool {
        matches!(self, LossKind::Rince { .. })
    }

    /// Loss value on raw inner products. An empty neighbour set for
    /// [`LossKind::InfoNceNn`] contributes zero.
    pub fn value(&self, pos: &[f64], neg: &[f64], tau: f64) -> f64 {
        match *self {
            LossKind::InfoNce => scores::info_nce_value(pos, neg, tau),
            LossKind::RevNce => scores::rev_nce_value(pos, neg, tau),
            LossKind::SymNce { beta } => {
                let info = scores::info_nce_value(pos, neg, tau);
                if beta == 0.0 {
                    info
                } else {
                    info + beta * scores::rev_nce_value(pos, neg, tau)
                }
            }
            LossKind::Rince { lambda } => scores::rince_value(pos[0], neg, lambda, tau),
            LossKind::InfoNceNn { threshold } => scores::info_nce_nn_value(pos, neg, threshold, tau).unwrap_or(0.0),
        }
    }

    /// Value and embedding gradients on a batch.
    pub fn evaluate(&self, batch: &ContrastiveBatch) -> Result<LossOutput> {
        match *self {
            LossKind::InfoNce => Ok(info_nce(batch)),
            LossKind::RevNce => Ok(rev_nce(batch)),
            LossKind::SymNce { beta } => sym_nce(batch, beta),
            LossKind::Rince { lambda } => rince(batch, lambda),
            LossKind::InfoNceNn { threshold } => Ok(info_nce_nn(batch, threshold).output),
        }
    }
}
