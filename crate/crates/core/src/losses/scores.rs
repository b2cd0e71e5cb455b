//! Loss values and derivatives expressed on raw inner products.
//!
//! Every function takes the anchor's raw inner products with its positives
//! (`pos`) and negatives (`neg`) plus the temperature; the exponent used by
//! the loss is `raw / tau`. Derivatives are returned with respect to the raw
//! inner products so callers only need the outer-product chain rule.

pub(crate) fn logsumexp_scaled(xs: &[f64], tau: f64) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / tau));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x / tau - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrad {
    pub value: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

/// Mean over positives of `-log(e^{s_m} / (e^{s_m} + sum_k e^{s_k}))`.
pub fn info_nce_value(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let lse_neg = logsumexp_scaled(neg, tau);
    pos.iter().map(|&p| softplus(lse_neg - p / tau)).sum::<f64>() / pos.len() as f64
}

pub fn info_nce_grad(pos: &[f64], neg: &[f64], tau: f64) -> ScoreGrad {
    let m = pos.len() as f64;
    let lse_neg = logsumexp_scaled(neg, tau);
    let mut value = 0.0;
    let mut weight_sum = 0.0;
    let d_pos = pos
        .iter()
        .map(|&p| {
            let z = lse_neg - p / tau;
            value += softplus(z);
            let w = sigmoid(z);
            weight_sum += w;
            -w / (m * tau)
        })
        .collect();
    let d_neg = neg
        .iter()
        .map(|&n| (n / tau - lse_neg).exp() * weight_sum / (m * tau))
        .collect();
    ScoreGrad { value: value / m, d_pos, d_neg }
}

/// `(1/K) sum_k -log( mean_m e^{s_m} / e^{s_k} )`.
pub fn rev_nce_value(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let mean_neg = neg.iter().sum::<f64>() / (neg.len() as f64 * tau);
    mean_neg - (logsumexp_scaled(pos, tau) - (pos.len() as f64).ln())
}

pub fn rev_nce_grad(pos: &[f64], neg: &[f64], tau: f64) -> ScoreGrad {
    let lse_pos = logsumexp_scaled(pos, tau);
    let k = neg.len() as f64;
    ScoreGrad {
        value: rev_nce_value(pos, neg, tau),
        d_pos: pos.iter().map(|&p| -(p / tau - lse_pos).exp() / tau).collect(),
        d_neg: vec![1.0 / (k * tau); neg.len()],
    }
}

/// `-(1 - lambda) e^{s+} + lambda sum_k e^{s_k}`, single positive.
pub fn rince_value(pos: f64, neg: &[f64], lambda: f64, tau: f64) -> f64 {
    -(1.0 - lambda) * (pos / tau).exp() + lambda * neg.iter().map(|&n| (n / tau).exp()).sum::<f64>()
}

pub fn rince_grad(pos: f64, neg: &[f64], lambda: f64, tau: f64) -> ScoreGrad {
    ScoreGrad {
        value: rince_value(pos, neg, lambda, tau),
        d_pos: vec![-(1.0 - lambda) * (pos / tau).exp() / tau],
        d_neg: neg.iter().map(|&n| lambda * (n / tau).exp() / tau).collect(),
    }
}

/// InfoNCE over the positives whose raw inner product is at least
/// `threshold`. Returns `None` when no positive survives.
pub fn info_nce_nn_value(pos: &[f64], neg: &[f64], threshold: f64, tau: f64) -> Option<f64> {
    let lse_neg = logsumexp_scaled(neg, tau);
    let (sum, kept) = pos
        .iter()
        .filter(|&&p| p >= threshold)
        .fold((0.0, 0usize), |(s, c), &p| (s + softplus(lse_neg - p / tau), c + 1));
    (kept > 0).then(|| sum / kept as f64)
}
