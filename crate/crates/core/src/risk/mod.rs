//! Clean, noisy and additional contrastive risks on finite populations.
//!
//! The three risks differ only in where the anchor, the positives and the
//! negatives are drawn from:
//!
//! | risk       | anchor and positives          | negatives |
//! |------------|-------------------------------|-----------|
//! | clean      | class `c ~ pi`, then `rho_c`  | `P_X`     |
//! | noisy      | class `i ~ pi~`, then `rho~_i`| `P_X`     |
//! | additional | anchor and each positive `P_X`| `P_X`     |
//!
//! Drawing a negative class from the priors and then a sample from its
//! conditional is the same as drawing from `P_X`, so the enumeration and the
//! sampler both work on mixtures directly.

mod checks;
mod exact;
mod monte_carlo;

use serde::{Deserialize, Serialize};

use crate::distribution::{noisy_conditional, FinitePopulation, NoiseModel, NoisyDistribution};
use crate::embedding::{dot, Encoder};
use crate::error::{Error, Result};
use crate::losses::LossKind;

pub use checks::{
    limit_delta_check, nn_gap, nn_threshold_solve, symmetric_noise_check, symmetric_noise_coefficients, row_product_noise_check, LimitRow,
    NnSolution, NnStatus, TheoremCheckReport,
};
pub use exact::{clean_risk_exact, delta_risk_exact, noisy_risk_by_class_pairs, noisy_risk_exact, required_evaluations};
pub use monte_carlo::{mc_risk, McEstimate};

/// Default cap on weighted loss evaluations for exact enumeration.
pub const DEFAULT_BUDGET: u128 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskKind {
    Clean,
    Noisy,
    Delta,
}

/// Everything needed to define the three risks of one loss and encoder.
#[derive(Debug, Clone)]
pub struct RiskSpec {
    pub loss: LossKind,
    pub m: usize,
    pub k: usize,
    pub population: FinitePopulation,
    pub noise: Option<NoiseModel>,
    pub encoder: Encoder,
    pub budget: u128,
}

impl RiskSpec {
    pub fn new(
        loss: LossKind,
        m: usize,
        k: usize,
        population: FinitePopulation,
        noise: Option<NoiseModel>,
        encoder: Encoder,
    ) -> Result<Self> {
        loss.validate()?;
        if m == 0 || k == 0 {
            return Err(Error::invalid(format!("need M >= 1 and K >= 1, got M={m}, K={k}")));
        }
        if loss.single_positive() && m != 1 {
            return Err(Error::invalid(format!("{} takes exactly one positive, got M={m}", loss.name())));
        }
        if let Some(noise) = &noise {
            if noise.num_classes() != population.num_classes() {
                return Err(Error::DimensionMismatch { expected: population.num_classes(), found: noise.num_classes() });
            }
            noisy_conditional(population.priors(), population.conditionals(), noise)?;
        }
        Ok(Self { loss, m, k, population, noise, encoder, budget: DEFAULT_BUDGET })
    }

    pub fn with_budget(mut self, budget: u128) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_loss(self, loss: LossKind) -> Result<Self> {
        Self::new(loss, self.m, self.k, self.population, self.noise, self.encoder).map(|s| Self { budget: self.budget, ..s })
    }

    pub fn num_classes(&self) -> usize {
        self.population.num_classes()
    }

    pub fn temperature(&self) -> f64 {
        self.encoder.temperature()
    }

    pub(crate) fn noisy(&self) -> Result<NoisyDistribution> {
        let noise = self.noise.as_ref().ok_or_else(|| Error::invalid("the noisy risk needs a noise model"))?;
        noisy_conditional(self.population.priors(), self.population.conditionals(), noise)
    }

    pub(crate) fn gram(&self) -> Result<Gram> {
        Gram::new(&self.encoder.embed_population(&self.population)?)
    }
}

/// Raw inner products `f(x_a)^T f(x_b)` over the support.
#[derive(Debug, Clone)]
pub(crate) struct Gram {
    n: usize,
    values: Vec<f64>,
}

impl Gram {
    pub(crate) fn new(embeddings: &[Vec<f64>]) -> Result<Self> {
        let n = embeddings.len();
        if n > 8192 {
            return Err(Error::invalid(format!("support of {n} points is too large for a dense Gram matrix")));
        }
        let mut values = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let v = dot(&embeddings[a], &embeddings[b]);
                values[a * n + b] = v;
                values[b * n + a] = v;
            }
        }
        Ok(Self { n, values })
    }

    #[inline]
    pub(crate) fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.n + b]
    }

    pub(crate) fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.n..(a + 1) * self.n]
    }
}

/// `E_{x, x' iid P} e^{f(x)^T f(x') / tau}` by direct double sum.
pub fn exp_moment(embeddings: &[Vec<f64>], mass: &[f64], tau: f64) -> f64 {
    let mut total = 0.0;
    for (a, &pa) in mass.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        let inner: f64 = mass
            .iter()
            .enumerate()
            .filter(|(_, &pb)| pb > 0.0)
            .map(|(b, &pb)| pb * (dot(&embeddings[a], &embeddings[b]) / tau).exp())
            .sum();
        total += pa * inner;
    }
    total
}

/// `-E s(x, x') + E_x log E_{x'} e^{s(x, x')}` with `x, x'` independent
/// draws from `mass` and `s = f(x)^T f(x') / tau`. This is the large-`M, K`
/// limit of the additional InfoNCE risk minus `log K`; it is never negative.
pub fn info_nce_limit_moment(embeddings: &[Vec<f64>], mass: &[f64], tau: f64) -> f64 {
    let mut total = 0.0;
    for (a, &pa) in mass.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        let s: Vec<(f64, f64)> = mass
            .iter()
            .enumerate()
            .filter(|(_, &pb)| pb > 0.0)
            .map(|(b, &pb)| (pb, dot(&embeddings[a], &embeddings[b]) / tau))
            .collect();
        let max = s.iter().fold(f64::NEG_INFINITY, |m, &(_, v)| m.max(v));
        let lse = max + s.iter().map(|&(p, v)| p * (v - max).exp()).sum::<f64>().ln();
        let mean = s.iter().map(|&(p, v)| p * v).sum::<f64>();
        total += pa * (lse - mean);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    MonteCarlo,
}

/// The three risks of one spec. Without a noise model the noisy risk equals
/// the clean one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub clean_risk: f64,
    pub noisy_risk: f64,
    pub delta_risk: f64,
    pub method: Method,
    /// Standard errors of clean, noisy and additional risk, in that order.
    pub mc_stderr: Option<[f64; 3]>,
    pub n_samples: Option<usize>,
}

pub fn risk_report_exact(spec: &RiskSpec) -> Result<RiskReport> {
    let clean_risk = clean_risk_exact(spec)?;
    let noisy_risk = if spec.noise.is_some() { noisy_risk_exact(spec)? } else { clean_risk };
    Ok(RiskReport {
        clean_risk,
        noisy_risk,
        delta_risk: delta_risk_exact(spec)?,
        method: Method::Exact,
        mc_stderr: None,
        n_samples: None,
    })
}

pub fn risk_report_mc(spec: &RiskSpec, n_samples: usize, seed: u64) -> Result<RiskReport> {
    let clean = mc_risk(spec, RiskKind::Clean, n_samples, seed)?;
    let noisy = if spec.noise.is_some() { mc_risk(spec, RiskKind::Noisy, n_samples, seed)? } else { clean };
    let delta = mc_risk(spec, RiskKind::Delta, n_samples, seed)?;
    Ok(RiskReport {
        clean_risk: clean.estimate,
        noisy_risk: noisy.estimate,
        delta_risk: delta.estimate,
        method: Method::MonteCarlo,
        mc_stderr: Some([clean.stderr, noisy.stderr, delta.stderr]),
        n_samples: Some(n_samples),
    })
}
