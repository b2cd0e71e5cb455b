//! Exact expectations by enumeration.
//!
//! Every risk is a weighted sum of components `E L(x, x+_1..M, x-_1..K)`
//! where the anchor, positives and negatives each have a distribution over
//! the support. All losses are symmetric in their positives and in their
//! negatives, so positive and negative tuples are enumerated as multisets
//! with multinomial weights.

use rayon::prelude::*;

use super::{Gram, RiskSpec};
use crate::error::{Error, Result};

/// One term `weight * E[L]` with the three sampling distributions.
pub(crate) struct Component {
    pub weight: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn support_size(mass: &[f64]) -> u128 {
    mass.iter().filter(|&&p| p > 0.0).count() as u128
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for i in 0..k {
        out = out.saturating_mul(n - i) / (i + 1);
    }
    out
}

/// Number of size-`size` multisets over `n` items.
fn multiset_count(n: u128, size: usize) -> u128 {
    if n == 0 {
        return 0;
    }
    binomial(n + size as u128 - 1, size as u128)
}

fn component_cost(c: &Component, m: usize, k: usize) -> u128 {
    support_size(&c.anchor)
        .saturating_mul(multiset_count(support_size(&c.positive), m))
        .saturating_mul(multiset_count(support_size(&c.negative), k))
}

/// Multisets of `size` support points with their probability under i.i.d.
/// draws from `mass`, in a fixed lexicographic order.
pub(crate) fn multisets(mass: &[f64], size: usize) -> Vec<(f64, Vec<usize>)> {
    let items: Vec<(usize, f64)> = mass.iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect();
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(size);
    fn go(
        items: &[(usize, f64)],
        remaining: usize,
        weight: f64,
        current: &mut Vec<usize>,
        out: &mut Vec<(f64, Vec<usize>)>,
    ) {
        if remaining == 0 {
            out.push((weight, current.clone()));
            return;
        }
        let Some((&(idx, p), rest)) = items.split_first() else { return };
        if rest.is_empty() {
            let w = weight * p.powi(remaining as i32);
            current.extend(std::iter::repeat_n(idx, remaining));
            out.push((w, current.clone()));
            current.truncate(current.len() - remaining);
            return;
        }
        // take `c` copies of this item, choose their slots among `remaining`
        let mut coef = 1.0;
        let mut pow = 1.0;
        for c in 0..=remaining {
            if c > 0 {
                coef *= (remaining - c + 1) as f64 / c as f64;
                pow *= p;
                current.push(idx);
            }
            go(rest, remaining - c, weight * coef * pow, current, out);
        }
        current.truncate(current.len() - remaining);
    }
    go(&items, size, 1.0, &mut current, &mut out);
    out
}

pub(crate) fn evaluate(spec: &RiskSpec, components: &[Component]) -> Result<f64> {
    let required = components
        .iter()
        .fold(0u128, |acc, c| acc.saturating_add(component_cost(c, spec.m, spec.k)));
    if required > spec.budget {
        return Err(Error::BudgetExceeded { required, budget: spec.budget });
    }
    let gram = spec.gram()?;
    let tau = spec.temperature();
    let loss = spec.loss;

    let mut tasks = Vec::new();
    let prepared: Vec<_> = components
        .iter()
        .map(|c| (multisets(&c.positive, spec.m), multisets(&c.negative, spec.k)))
        .collect();
    for (ci, c) in components.iter().enumerate() {
        for (x, &px) in c.anchor.iter().enumerate() {
            if px > 0.0 {
                tasks.push((ci, x, c.weight * px));
            }
        }
    }

    let anchor_value = |&(ci, x, w): &(usize, usize, f64), gram: &Gram| -> f64 {
        let (pos_sets, neg_sets) = &prepared[ci];
        let row = gram.row(x);
        let neg_raw: Vec<(f64, Vec<f64>)> =
            neg_sets.iter().map(|(p, idx)| (*p, idx.iter().map(|&j| row[j]).collect())).collect();
        let mut total = 0.0;
        let mut pos_raw = Vec::with_capacity(spec.m);
        for (pw, pidx) in pos_sets {
            pos_raw.clear();
            pos_raw.extend(pidx.iter().map(|&j| row[j]));
            let inner: f64 = neg_raw.iter().map(|(nw, neg)| nw * loss.value(&pos_raw, neg, tau)).sum();
            total += pw * inner;
        }
        w * total
    };
    let parts: Vec<f64> = tasks.par_iter().map(|t| anchor_value(t, &gram)).collect();
    Ok(parts.iter().sum())
}

/// Total weighted loss evaluations the enumeration of one risk would need.
pub fn required_evaluations(spec: &RiskSpec, which: super::RiskKind) -> Result<u128> {
    let comps = match which {
        super::RiskKind::Clean => clean_components(spec),
        super::RiskKind::Noisy => noisy_components(spec)?,
        super::RiskKind::Delta => delta_components(spec),
    };
    Ok(comps.iter().fold(0u128, |acc, c| acc.saturating_add(component_cost(c, spec.m, spec.k))))
}

fn clean_components(spec: &RiskSpec) -> Vec<Component> {
    let pop = &spec.population;
    let marginal = pop.marginal();
    pop.priors()
        .iter()
        .zip(pop.conditionals())
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, rho)| Component { weight: p, anchor: rho.clone(), positive: rho.clone(), negative: marginal.clone() })
        .collect()
}

fn noisy_components(spec: &RiskSpec) -> Result<Vec<Component>> {
    let noisy = spec.noisy()?;
    let negative = noisy.marginal();
    Ok(noisy
        .noisy_priors
        .iter()
        .zip(&noisy.noisy_conditionals)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, rho)| Component { weight: p, anchor: rho.clone(), positive: rho.clone(), negative: negative.clone() })
        .collect())
}

fn delta_components(spec: &RiskSpec) -> Vec<Component> {
    let marginal = spec.population.marginal();
    vec![Component { weight: 1.0, anchor: marginal.clone(), positive: marginal.clone(), negative: marginal }]
}

/// Expected loss with anchor and positives from the same true class.
pub fn clean_risk_exact(spec: &RiskSpec) -> Result<f64> {
    evaluate(spec, &clean_components(spec))
}

/// Expected loss with anchor and positives from the same noisy class.
pub fn noisy_risk_exact(spec: &RiskSpec) -> Result<f64> {
    evaluate(spec, &noisy_components(spec)?)
}

/// Expected loss with anchor, every positive and every negative drawn
/// independently from the data distribution.
pub fn delta_risk_exact(spec: &RiskSpec) -> Result<f64> {
    evaluate(spec, &delta_components(spec))
}

/// The noisy risk rebuilt from clean pieces: for every noisy class `i` and
/// true classes `u, u+`, weight `pi_u pi_u+ q_u(i) q_u+(i) / a(i)` on the
/// loss with anchor from `rho_u`, positive from `rho_u+` and negatives from
/// the clean data distribution, where `a(i) = sum_u q_u(i) pi_u`.
pub fn noisy_risk_by_class_pairs(spec: &RiskSpec) -> Result<f64> {
    if spec.m != 1 {
        return Err(Error::invalid(format!("the decomposition is defined for one positive, got M={}", spec.m)));
    }
    let noise = spec.noise.as_ref().ok_or_else(|| Error::invalid("the decomposition needs a noise model"))?;
    let pop = &spec.population;
    let (pi, rho) = (pop.priors(), pop.conditionals());
    let c = pop.num_classes();
    let marginal = pop.marginal();
    let mut components = Vec::new();
    for i in 0..c {
        let a: f64 = (0..c).map(|u| noise.q(u, i) * pi[u]).sum();
        if a <= 0.0 {
            return Err(Error::DegenerateClass(i));
        }
        for u in 0..c {
            for v in 0..c {
                let weight = pi[u] * pi[v] * noise.q(u, i) * noise.q(v, i) / a;
                if weight > 0.0 {
                    components.push(Component {
                        weight,
                        anchor: rho[u].clone(),
                        positive: rho[v].clone(),
                        negative: marginal.clone(),
                    });
                }
            }
        }
    }
    evaluate(spec, &components)
}
