//! Finite populations, label-corruption models and the noisy distributions
//! they induce.
//!
//! Every population lives on an explicit finite support so that risks can be
//! enumerated exactly. A [`NoiseModel`] stores the corruption matrix with
//! row `j` holding the distribution of the reported label given true label
//! `j`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const SUM_TOL: f64 = 1e-12;

fn check_probability_vector(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&x| !(-SUM_TOL..=1.0 + SUM_TOL).contains(&x) || !x.is_finite()) {
        return Err(Error::invalid(format!("{what} has entries outside [0, 1]")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// A finite sample space with features, true labels, class priors and
/// class-conditional masses over the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePopulation {
    features: Vec<Vec<f64>>,
    true_labels: Vec<usize>,
    priors: Vec<f64>,
    conditionals: Vec<Vec<f64>>,
}

impl FinitePopulation {
    /// Builds a population and checks every invariant, including that each
    /// class conditional only charges samples carrying that class label.
    pub fn new(
        features: Vec<Vec<f64>>,
        true_labels: Vec<usize>,
        priors: Vec<f64>,
        conditionals: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let pop = Self::with_conditionals(features, true_labels, priors, conditionals)?;
        for (class, rho) in pop.conditionals.iter().enumerate() {
            for (idx, &mass) in rho.iter().enumerate() {
                if mass > 0.0 && pop.true_labels[idx] != class {
                    return Err(Error::invalid(format!(
                        "conditional {class} charges sample {idx} labelled {}",
                        pop.true_labels[idx]
                    )));
                }
            }
        }
        Ok(pop)
    }

    /// Like [`FinitePopulation::new`] but allows conditionals whose support
    /// overlaps other classes. Used for synthetic overlap tests.
    pub fn with_conditionals(
        features: Vec<Vec<f64>>,
        true_labels: Vec<usize>,
        priors: Vec<f64>,
        conditionals: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = features.len();
        let c = priors.len();
        if c < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if n < c {
            return Err(Error::invalid(format!("{n} samples cannot cover {c} classes")));
        }
        if true_labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: true_labels.len() });
        }
        if let Some(&bad) = true_labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
        }
        let p = features.first().map_or(0, Vec::len);
        if let Some(row) = features.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch { expected: p, found: row.len() });
        }
        if conditionals.len() != c {
            return Err(Error::DimensionMismatch { expected: c, found: conditionals.len() });
        }
        check_probability_vector(&priors, "priors")?;
        for (i, rho) in conditionals.iter().enumerate() {
            if rho.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: rho.len() });
            }
            check_probability_vector(rho, &format!("conditional {i}"))?;
        }
        Ok(Self { features, true_labels, priors, conditionals })
    }

    /// Population whose priors are the empirical class frequencies and whose
    /// conditionals are uniform over each class's samples.
    pub fn from_labeled(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        let mut counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::invalid(format!("label {y} outside [0, {num_classes})")));
            }
            counts[y] += 1;
        }
        if let Some(empty) = counts.iter().position(|&k| k == 0) {
            return Err(Error::invalid(format!("class {empty} has no samples")));
        }
        let priors = counts.iter().map(|&k| k as f64 / n as f64).collect();
        let conditionals = (0..num_classes)
            .map(|c| {
                labels
                    .iter()
                    .map(|&y| if y == c { 1.0 / counts[c] as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(features, labels, priors, conditionals)
    }

    /// Replaces the class priors, keeping features and conditionals.
    pub fn with_priors(mut self, priors: Vec<f64>) -> Result<Self> {
        if priors.len() != self.num_classes() {
            return Err(Error::DimensionMismatch { expected: self.num_classes(), found: priors.len() });
        }
        check_probability_vector(&priors, "priors")?;
        self.priors = priors;
        Ok(self)
    }

    pub fn num_samples(&self) -> usize {
        self.features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn conditionals(&self) -> &[Vec<f64>] {
        &self.conditionals
    }

    /// The unconditional data distribution `sum_j pi_j rho_j` over samples.
    pub fn marginal(&self) -> Vec<f64> {
        mixture(&self.priors, &self.conditionals)
    }

    /// True when every prior equals `1/C` within `tol`.
    pub fn is_balanced(&self, tol: f64) -> bool {
        let c = self.num_classes() as f64;
        self.priors.iter().all(|&p| (p - 1.0 / c).abs() <= tol)
    }
}

pub(crate) fn mixture(weights: &[f64], conditionals: &[Vec<f64>]) -> Vec<f64> {
    let n = conditionals.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for (w, rho) in weights.iter().zip(conditionals) {
        for (o, r) in out.iter_mut().zip(rho) {
            *o += w * r;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    Circulant,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
            NoiseKind::Circulant => "circulant",
        }
    }
}

/// Label-corruption model: `transition[j][i]` is the probability that true
/// label `j` is reported as `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    kind: NoiseKind,
    #[serde(rename = "C")]
    num_classes: usize,
    #[serde(rename = "matrix")]
    transition: Vec<Vec<f64>>,
}

impl NoiseModel {
    /// Uniform corruption: stay with probability `1 - gamma`, otherwise move
    /// to each other class with probability `gamma / (C - 1)`.
    pub fn symmetric(num_classes: usize, gamma: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("symmetric noise needs C >= 2"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("noise rate {gamma} outside [0, 1)")));
        }
        let off = gamma / (num_classes - 1) as f64;
        let diag = 1.0 - off * (num_classes - 1) as f64;
        let transition = (0..num_classes)
            .map(|j| (0..num_classes).map(|i| if i == j { diag } else { off }).collect())
            .collect();
        Ok(Self { kind: NoiseKind::Symmetric, num_classes, transition })
    }

    pub fn identity(num_classes: usize) -> Result<Self> {
        Self::symmetric(num_classes, 0.0)
    }

    /// Circulant corruption `transition[j][i] = offsets[(i - j) mod C]`.
    ///
    /// Circulant matrices are doubly stochastic and every row has the same
    /// self-product. Cross-products between distinct rows are constant for
    /// `C <= 3` and for the symmetric family, not in general; see
    /// [`NoiseModel::row_products`].
    pub fn circulant(num_classes: usize, offsets: &[f64]) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("circulant noise needs C >= 2"));
        }
        if offsets.len() != num_classes {
            return Err(Error::DimensionMismatch { expected: num_classes, found: offsets.len() });
        }
        if offsets.iter().any(|&g| g < 0.0 || !g.is_finite()) {
            return Err(Error::invalid("circulant offsets must be nonnegative"));
        }
        let total: f64 = offsets.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("circulant offsets sum to {total}, not 1")));
        }
        let mut g = offsets.to_vec();
        g[0] = 1.0 - offsets[1..].iter().sum::<f64>();
        let transition = (0..num_classes)
            .map(|j| (0..num_classes).map(|i| g[(i + num_classes - j) % num_classes]).collect())
            .collect();
        Ok(Self { kind: NoiseKind::Circulant, num_classes, transition })
    }

    /// Class-pair flips: each `(from, to)` pair moves a fraction `gamma` of
    /// class `from` to class `to`. Classes not listed stay clean.
    pub fn pair_flip(num_classes: usize, pairs: &[(usize, usize)], gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("noise rate {gamma} outside [0, 1)")));
        }
        let mut m: Vec<Vec<f64>> = (0..num_classes)
            .map(|j| (0..num_classes).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for &(from, to) in pairs {
            if from >= num_classes || to >= num_classes || from == to {
                return Err(Error::invalid(format!("bad flip pair ({from}, {to})")));
            }
            m[from][from] = 1.0 - gamma;
            m[from][to] = gamma;
        }
        Self::from_matrix(NoiseKind::Asymmetric, m)
    }

    /// Wraps an explicit transition matrix after validating it.
    pub fn from_matrix(kind: NoiseKind, transition: Vec<Vec<f64>>) -> Result<Self> {
        let model = Self { kind, num_classes: transition.len(), transition };
        model.validate()?;
        Ok(model)
    }

    /// Checks shape and row-stochasticity (used after deserialisation).
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 || self.transition.len() != c {
            return Err(Error::invalid(format!("noise matrix must be {c}x{c} with C >= 2")));
        }
        for (j, row) in self.transition.iter().enumerate() {
            if row.len() != c {
                return Err(Error::DimensionMismatch { expected: c, found: row.len() });
            }
            check_probability_vector(row, &format!("noise row {j}"))?;
        }
        Ok(())
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// Probability that true label `from` is reported as `to`.
    pub fn q(&self, from: usize, to: usize) -> f64 {
        self.transition[from][to]
    }

    /// The common noise rate when the matrix has the symmetric shape.
    pub fn symmetric_rate(&self) -> Option<f64> {
        let c = self.num_classes;
        let gamma = 1.0 - self.transition[0][0];
        let off = gamma / (c - 1) as f64;
        let fits = self.transition.iter().enumerate().all(|(j, row)| {
            row.iter().enumerate().all(|(i, &q)| {
                let want = if i == j { 1.0 - gamma } else { off };
                (q - want).abs() <= 1e-12
            })
        });
        fits.then_some(gamma)
    }

    /// Returns `(c1, c2)` where `c1 = sum_i q_u(i)^2` and
    /// `c2 = sum_i q_u(i) q_v(i)` for `u != v`, provided both are the same
    /// for every class (pair) within `tol`.
    pub fn row_products(&self, tol: f64) -> Result<(f64, f64)> {
        let t = &self.transition;
        let dot = |u: usize, v: usize| -> f64 { t[u].iter().zip(&t[v]).map(|(a, b)| a * b).sum() };
        let c1 = dot(0, 0);
        let c2 = dot(0, 1);
        for u in 0..self.num_classes {
            for v in 0..self.num_classes {
                let (want, which) = if u == v { (c1, "c1") } else { (c2, "c2") };
                let got = dot(u, v);
                if (got - want).abs() > tol {
                    return Err(Error::HypothesisViolated(format!(
                        "{which} not constant: ({u},{v}) gives {got}, expected {want}"
                    )));
                }
            }
        }
        Ok((c1, c2))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Noisy class priors and class conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDistribution {
    pub noisy_priors: Vec<f64>,
    pub noisy_conditionals: Vec<Vec<f64>>,
}

impl NoisyDistribution {
    /// `sum_i pi~_i rho~_i`, which equals the clean marginal.
    pub fn marginal(&self) -> Vec<f64> {
        mixture(&self.noisy_priors, &self.noisy_conditionals)
    }
}

/// `pi~_i = sum_j q_j(i) pi_j`.
pub fn noisy_marginal(priors: &[f64], noise: &NoiseModel) -> Result<Vec<f64>> {
    let c = noise.num_classes();
    if priors.len() != c {
        return Err(Error::DimensionMismatch { expected: c, found: priors.len() });
    }
    Ok((0..c).map(|i| (0..c).map(|j| noise.q(j, i) * priors[j]).sum()).collect())
}

/// `rho~_i(x) = sum_j q_j(i) rho_j(x) pi_j / pi~_i`.
pub fn noisy_conditional(priors: &[f64], conditionals: &[Vec<f64>], noise: &NoiseModel) -> Result<NoisyDistribution> {
    let c = noise.num_classes();
    if conditionals.len() != c {
        return Err(Error::DimensionMismatch { expected: c, found: conditionals.len() });
    }
    let noisy_priors = noisy_marginal(priors, noise)?;
    let n = conditionals[0].len();
    let mut noisy_conditionals = Vec::with_capacity(c);
    for (i, &pt) in noisy_priors.iter().enumerate() {
        if pt <= 0.0 {
            return Err(Error::DegenerateClass(i));
        }
        let mut rho = vec![0.0; n];
        for j in 0..c {
            let w = noise.q(j, i) * priors[j];
            if w == 0.0 {
                continue;
            }
            for (r, &x) in rho.iter_mut().zip(&conditionals[j]) {
                *r += w * x;
            }
        }
        rho.iter_mut().for_each(|r| *r /= pt);
        noisy_conditionals.push(rho);
    }
    Ok(NoisyDistribution { noisy_priors, noisy_conditionals })
}

/// Resamples every label from its transition row. Draw `k` uses its own
/// stream keyed by `(seed, k)`, so the output does not depend on order.
pub fn inject_noise(labels: &[usize], noise: &NoiseModel, seed: u64) -> Result<Vec<usize>> {
    let c = noise.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
    }
    Ok(labels
        .par_iter()
        .enumerate()
        .map(|(k, &y)| {
            let u: f64 = rng::stream(seed, &[k as u64]).random();
            sample_row(&noise.transition[y], u)
        })
        .collect())
}

/// Inverse-CDF lookup; falls back to the last positive entry on rounding.
pub(crate) fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Class means used by [`make_gaussian_mixture`]: `separation * e_c` when
/// `p >= C`, otherwise equally spaced points on a circle of radius
/// `separation` in the first two coordinates.
pub fn mixture_means(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim >= num_classes {
                m[c] = separation;
            } else {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                m[0] = separation * angle.cos();
                m[1] = separation * angle.sin();
            }
            m
        })
        .collect()
}

/// Isotropic unit-variance Gaussian mixture with uniform priors. Samples are
/// stored class-major; sample `k` of class `c` draws from stream `(seed, c, k)`.
pub fn make_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<FinitePopulation> {
    if num_classes < 2 || dim < 2 || n_per_class < 2 {
        return Err(Error::invalid("gaussian mixture needs C >= 2, p >= 2, n_per_class >= 2"));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::invalid(format!("separation {separation} must be finite and nonnegative")));
    }
    let means = mixture_means(num_classes, dim, separation);
    let mut features = Vec::with_capacity(num_classes * n_per_class);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for k in 0..n_per_class {
            let mut r = rng::stream(seed, &[c as u64, k as u64]);
            let x = mean
                .iter()
                .map(|m| m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                .collect();
            features.push(x);
            labels.push(c);
        }
    }
    FinitePopulation::from_labeled(features, labels, num_classes)
}

/// Writes `feature_0,...,feature_{p-1},label` rows.
pub fn write_population_csv<W: Write>(features: &[Vec<f64>], labels: &[usize], out: W) -> Result<()> {
    let p = features.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..p).map(|i| format!("feature_{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (x, y) in features.iter().zip(labels) {
        let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a population CSV; priors are class frequencies.
pub fn read_population_csv<R: Read>(input: R, num_classes: Option<usize>) -> Result<FinitePopulation> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let p = header.len().saturating_sub(1);
    let well_formed = header.iter().next_back() == Some("label")
        && header.iter().take(p).enumerate().all(|(i, h)| h == format!("feature_{i}"));
    if !well_formed {
        return Err(Error::MalformedConfig("population header must be feature_0,...,label".into()));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |field: &str| Error::MalformedConfig(format!("row {}: bad value {field:?}", line + 2));
        let x = rec
            .iter()
            .take(p)
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(f)))
            .collect::<Result<Vec<_>>>()?;
        let y_field = rec.get(p).unwrap_or("");
        let y = y_field.trim().parse::<usize>().map_err(|_| parse_err(y_field))?;
        features.push(x);
        labels.push(y);
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    FinitePopulation::from_labeled(features, labels, c)
}

pub fn read_population_file(path: &Path, num_classes: Option<usize>) -> Result<FinitePopulation> {
    read_population_csv(std::fs::File::open(path)?, num_classes)
}
