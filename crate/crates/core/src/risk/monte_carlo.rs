//! Monte Carlo risk estimates with counter-based randomness.
//!
//! Draw `j` uses its own generator keyed by `(seed, j)`. Draws are grouped in
//! fixed-size chunks whose running moments are merged in chunk order, so the
//! estimate does not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{RiskKind, RiskSpec};
use crate::error::{Error, Result};
use crate::rng;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    /// Sample standard deviation over `sqrt(n)`; zero for a constant loss.
    pub stderr: f64,
    pub n_samples: usize,
}

/// Cumulative table for inverse-CDF sampling.
struct Sampler {
    cdf: Vec<f64>,
    last: usize,
}

impl Sampler {
    fn new(mass: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = mass
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        let last = mass.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Self { cdf, last }
    }

    fn draw<R: Rng>(&self, r: &mut R) -> usize {
        let u: f64 = r.random();
        self.cdf.partition_point(|&c| c <= u).min(self.last)
    }
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if self.n == 0.0 {
            return other;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * other.n / n,
            m2: self.m2 + other.m2 + delta * delta * self.n * other.n / n,
        }
    }
}

/// Unbiased estimate of one risk from `n_samples` independent draws.
pub fn mc_risk(spec: &RiskSpec, which: RiskKind, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if n_samples < 100 {
        return Err(Error::invalid(format!("Monte Carlo needs at least 100 draws, got {n_samples}")));
    }
    let pop = &spec.population;
    let (class_mass, conditionals) = match which {
        RiskKind::Clean | RiskKind::Delta => (pop.priors().to_vec(), pop.conditionals().to_vec()),
        RiskKind::Noisy => {
            let nd = spec.noisy()?;
            (nd.noisy_priors, nd.noisy_conditionals)
        }
    };
    let classes = Sampler::new(&class_mass);
    let within: Vec<Sampler> = conditionals.iter().map(|c| Sampler::new(c)).collect();
    let marginal = Sampler::new(&pop.marginal());
    let gram = spec.gram()?;
    let (m, k, tau, loss) = (spec.m, spec.k, spec.temperature(), spec.loss);
    let stream_key = match which {
        RiskKind::Clean => 0,
        RiskKind::Noisy => 1,
        RiskKind::Delta => 2,
    };

    let one_draw = |j: usize, pos: &mut Vec<f64>, neg: &mut Vec<f64>| -> f64 {
        let mut r = rng::stream(seed, &[stream_key, j as u64]);
        pos.clear();
        neg.clear();
        let anchor = match which {
            RiskKind::Delta => {
                let x = marginal.draw(&mut r);
                pos.extend((0..m).map(|_| gram.get(x, marginal.draw(&mut r))));
                x
            }
            _ => {
                let c = classes.draw(&mut r);
                let x = within[c].draw(&mut r);
                pos.extend((0..m).map(|_| gram.get(x, within[c].draw(&mut r))));
                x
            }
        };
        neg.extend((0..k).map(|_| gram.get(anchor, marginal.draw(&mut r))));
        loss.value(pos, neg, tau)
    };

    let chunks = n_samples.div_ceil(CHUNK);
    let partial: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut acc = Moments::default();
            let (mut pos, mut neg) = (Vec::with_capacity(m), Vec::with_capacity(k));
            for j in ci * CHUNK..((ci + 1) * CHUNK).min(n_samples) {
                acc.push(one_draw(j, &mut pos, &mut neg));
            }
            acc
        })
        .collect();
    let total = partial.into_iter().fold(Moments::default(), Moments::merge);
    let var = total.m2.max(0.0) / (total.n - 1.0);
    Ok(McEstimate { estimate: total.mean, stderr: (var / total.n).sqrt(), n_samples })
}
