//! Identity checks relating the three risks, the large-`M, K` limits and
//! the neighbour-threshold search.

use serde::{Deserialize, Serialize};

use super::{
    clean_risk_exact, delta_risk_exact, info_nce_limit_moment, mc_risk, noisy_risk_exact, Gram, RiskKind, RiskSpec,
};
use crate::distribution::{noisy_marginal, FinitePopulation};
use crate::embedding::Encoder;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::rng;

const BALANCE_TOL: f64 = 1e-12;
const ROW_PRODUCT_TOL: f64 = 1e-10;

/// Outcome of comparing the noisy risk with its affine prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub theorem: String,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub gamma: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub loss: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl TheoremCheckReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(theorem: &str, spec: &RiskSpec, gamma: Option<f64>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let residual = (lhs - rhs).abs();
        Self {
            theorem: theorem.to_string(),
            num_classes: spec.num_classes(),
            gamma,
            m: spec.m,
            k: spec.k,
            loss: spec.loss.name().to_string(),
            lhs,
            rhs,
            residual,
            tolerance,
            pass: residual <= tolerance,
        }
    }
}

/// Weights `(a, b)` with `noisy = a * clean + b * additional` under
/// symmetric noise of rate `gamma` on `C` balanced classes. They sum to one.
pub fn symmetric_noise_coefficients(num_classes: usize, gamma: f64) -> (f64, f64) {
    let r = num_classes as f64 * gamma / (num_classes as f64 - 1.0);
    ((1.0 - r) * (1.0 - r), r * (2.0 - r))
}

fn require_single_positive(spec: &RiskSpec) -> Result<()> {
    if spec.m != 1 {
        return Err(Error::invalid(format!("affine identities are checked with one positive, got M={}", spec.m)));
    }
    Ok(())
}

fn require_balanced(spec: &RiskSpec) -> Result<()> {
    if !spec.population.is_balanced(BALANCE_TOL) {
        return Err(Error::HypothesisRejected(format!("class priors {:?} are not balanced", spec.population.priors())));
    }
    Ok(())
}

/// Compares the noisy risk with `a * clean + b * additional` for symmetric
/// noise. Rejects specs with unbalanced priors or non-symmetric noise.
pub fn symmetric_noise_check(spec: &RiskSpec, tolerance: f64) -> Result<TheoremCheckReport> {
    require_single_positive(spec)?;
    require_balanced(spec)?;
    let noise = spec.noise.as_ref().ok_or_else(|| Error::invalid("check needs a noise model"))?;
    let gamma = noise
        .symmetric_rate()
        .ok_or_else(|| Error::HypothesisRejected("noise matrix is not symmetric".into()))?;
    let (a, b) = symmetric_noise_coefficients(spec.num_classes(), gamma);
    let lhs = noisy_risk_exact(spec)?;
    let rhs = a * clean_risk_exact(spec)? + b * delta_risk_exact(spec)?;
    Ok(TheoremCheckReport::new("symmetric-affine", spec, Some(gamma), lhs, rhs, tolerance))
}

/// Compares the noisy risk with `(c1 - c2) * clean + C * c2 * additional`
/// where `c1 = sum_i q_u(i)^2` and `c2 = sum_i q_u(i) q_v(i)`, `u != v`,
/// must not depend on the classes.
pub fn row_product_noise_check(spec: &RiskSpec, tolerance: f64) -> Result<TheoremCheckReport> {
    require_single_positive(spec)?;
    require_balanced(spec)?;
    let noise = spec.noise.as_ref().ok_or_else(|| Error::invalid("check needs a noise model"))?;
    let (c1, c2) = noise.row_products(ROW_PRODUCT_TOL)?;
    let c = spec.num_classes() as f64;
    let noisy_priors = noisy_marginal(spec.population.priors(), noise)?;
    if noisy_priors.iter().any(|&p| (p - 1.0 / c).abs() > BALANCE_TOL) {
        return Err(Error::HypothesisRejected(format!("noisy priors {noisy_priors:?} are not balanced")));
    }
    let lhs = noisy_risk_exact(spec)?;
    let rhs = (c1 - c2) * clean_risk_exact(spec)? + c * c2 * delta_risk_exact(spec)?;
    Ok(TheoremCheckReport::new("row-product-affine", spec, noise.symmetric_rate(), lhs, rhs, tolerance))
}

/// One row of a convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub target: f64,
    pub gap: f64,
}

/// Monte Carlo additional risk at each `(M, K)` minus its large-`M, K` value.
///
/// With `g` the nonnegative moment of [`super::info_nce_limit_moment`], the
/// limits are `log K + g` for InfoNCE, `-g` for RevNCE and
/// `log K + (1 - beta) g` for SymNCE, so SymNCE at `beta = 1` tends to
/// `log K` whatever the encoder.
pub fn limit_delta_check(
    encoder: &Encoder,
    population: &FinitePopulation,
    loss: LossKind,
    schedule: &[(usize, usize)],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<LimitRow>> {
    if schedule.is_empty() {
        return Err(Error::invalid("empty (M, K) schedule"));
    }
    if schedule.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
        return Err(Error::invalid("schedule must be nondecreasing in both M and K"));
    }
    let emb = encoder.embed_population(population)?;
    let g = info_nce_limit_moment(&emb, &population.marginal(), encoder.temperature());
    schedule
        .iter()
        .map(|&(m, k)| {
            let log_k = (k as f64).ln();
            let target = match loss {
                LossKind::InfoNce => log_k + g,
                LossKind::RevNce => -g,
                LossKind::SymNce { beta } => log_k + (1.0 - beta) * g,
                other => return Err(Error::invalid(format!("no limit target for {}", other.name()))),
            };
            let spec = RiskSpec::new(loss, m, k, population.clone(), None, encoder.clone())?;
            let est = mc_risk(&spec, RiskKind::Delta, n_samples, rng::derive(seed, &[m as u64, k as u64]))?;
            Ok(LimitRow { m, k, estimate: est.estimate, stderr: est.stderr, target, gap: est.estimate - target })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NnStatus {
    /// `|g(t)| <= tol` at the returned threshold.
    Root,
    /// `g` changes sign across a jump narrower than the bisection resolution;
    /// the returned threshold is the first point past the jump.
    SignChangeAtJump,
    /// `g` keeps one sign on the feasible range; the boundary with the
    /// smaller `|g|` is returned.
    NoSignChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnSolution {
    pub threshold: f64,
    pub residual: f64,
    pub status: NnStatus,
    pub iterations: usize,
}

/// Precomputed pieces of the neighbour-threshold gap.
struct NnProblem {
    gram: Gram,
    mass: Vec<f64>,
    support: Vec<usize>,
    tau: f64,
    /// `E_x log E_{x'} e^{s(x, x')}`.
    log_partition: f64,
}

impl NnProblem {
    fn new(encoder: &Encoder, population: &FinitePopulation) -> Result<Self> {
        let gram = Gram::new(&encoder.embed_population(population)?)?;
        let mass = population.marginal();
        let support: Vec<usize> = (0..mass.len()).filter(|&j| mass[j] > 0.0).collect();
        let tau = encoder.temperature();
        let mut log_partition = 0.0;
        for &x in &support {
            let s: Vec<f64> = support.iter().map(|&y| gram.get(x, y) / tau).collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = support.iter().zip(&s).map(|(&y, &v)| mass[y] * (v - max).exp()).sum();
            log_partition += mass[x] * (max + z.ln());
        }
        Ok(Self { gram, mass, support, tau, log_partition })
    }

    /// Largest threshold at which every anchor keeps a neighbour.
    fn feasible_max(&self) -> f64 {
        self.support
            .iter()
            .map(|&x| self.support.iter().map(|&y| self.gram.get(x, y)).fold(f64::NEG_INFINITY, f64::max))
            .fold(f64::INFINITY, f64::min)
    }

    fn gap(&self, t: f64) -> Option<f64> {
        let mut kept_mean = 0.0;
        for &x in &self.support {
            let (mut w, mut ws) = (0.0, 0.0);
            for &y in &self.support {
                let raw = self.gram.get(x, y);
                if raw >= t {
                    w += self.mass[y];
                    ws += self.mass[y] * raw / self.tau;
                }
            }
            if w == 0.0 {
                return None;
            }
            kept_mean += self.mass[x] * ws / w;
        }
        Some(-kept_mean + self.log_partition)
    }
}

/// The gap `g(t) = -E_x E_{x' in N(x; t)} s(x, x') + E_x log E_{x'} e^{s(x, x')}`
/// between the thresholded additional InfoNCE risk and `log K` in the
/// large-`M, K` limit. `N(x; t)` keeps the support points whose raw inner
/// product with `x` is at least `t`. `None` when some anchor has no neighbour.
pub fn nn_gap(encoder: &Encoder, population: &FinitePopulation, t: f64) -> Result<Option<f64>> {
    Ok(NnProblem::new(encoder, population)?.gap(t))
}

/// Bisection for a threshold where [`nn_gap`] vanishes, over `[-1, t_max]`
/// with `t_max` the largest feasible threshold.
pub fn nn_threshold_solve(
    encoder: &Encoder,
    population: &FinitePopulation,
    tol: f64,
    max_iter: usize,
) -> Result<NnSolution> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance {tol} must be positive")));
    }
    let problem = NnProblem::new(encoder, population)?;
    let mut lo = -1.0f64;
    let mut hi = problem.feasible_max();
    if hi < lo {
        lo = hi;
    }
    let g_lo = problem.gap(lo).expect("thresholds up to t_max are feasible");
    if g_lo.abs() <= tol {
        return Ok(NnSolution { threshold: lo, residual: g_lo.abs(), status: NnStatus::Root, iterations: 0 });
    }
    let g_hi = problem.gap(hi).expect("t_max is feasible");
    if g_hi.abs() <= tol {
        return Ok(NnSolution { threshold: hi, residual: g_hi.abs(), status: NnStatus::Root, iterations: 0 });
    }
    if g_lo.signum() == g_hi.signum() {
        let (threshold, residual) = if g_lo.abs() <= g_hi.abs() { (lo, g_lo.abs()) } else { (hi, g_hi.abs()) };
        return Ok(NnSolution { threshold, residual, status: NnStatus::NoSignChange, iterations: 0 });
    }
    let lo_sign = g_lo.signum();
    let mut g_hi = g_hi;
    for iter in 1..=max_iter {
        let mid = 0.5 * (lo + hi);
        let g_mid = problem.gap(mid).expect("inside the feasible range");
        if g_mid.abs() <= tol {
            return Ok(NnSolution { threshold: mid, residual: g_mid.abs(), status: NnStatus::Root, iterations: iter });
        }
        if g_mid.signum() == lo_sign {
            lo = mid;
        } else {
            hi = mid;
            g_hi = g_mid;
        }
    }
    Ok(NnSolution { threshold: hi, residual: g_hi.abs(), status: NnStatus::SignChangeAtJump, iterations: max_iter })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{constant_encoder, encoder, population};
    use super::*;
    use crate::distribution::NoiseModel;
    use crate::embedding::{EncoderKind, RepresentationConfig};

    fn all_losses() -> [LossKind; 5] {
        [
            LossKind::InfoNce,
            LossKind::RevNce,
            LossKind::SymNce { beta: 1.0 },
            LossKind::Rince { lambda: 0.7 },
            LossKind::InfoNceNn { threshold: 0.0 },
        ]
    }

    #[test]
    fn coefficients() {
        let (a, b) = symmetric_noise_coefficients(10, 0.2);
        assert!((a - 0.604_938_271_604_938_3).abs() < 1e-15);
        assert!((b - 0.395_061_728_395_061_7).abs() < 1e-15);
        assert_eq!(symmetric_noise_coefficients(5, 0.0), (1.0, 0.0));
        for c in 2..12 {
            for step in 0..20 {
                let (a, b) = symmetric_noise_coefficients(c, step as f64 * 0.045);
                assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_identity_holds_for_every_loss() {
        let pop = population(3, 2, 4);
        for gamma in [0.1, 0.3, 0.5] {
            let noise = NoiseModel::symmetric(3, gamma).unwrap();
            for loss in all_losses() {
                let spec = RiskSpec::new(loss, 1, 2, pop.clone(), Some(noise.clone()), encoder(2)).unwrap();
                let report = symmetric_noise_check(&spec, 1e-10).unwrap();
                assert!(report.pass, "{report:?}");
            }
        }
    }

    #[test]
    fn unbalanced_priors_are_rejected() {
        let pop = population(3, 2, 4).with_priors(vec![0.5, 0.3, 0.2]).unwrap();
        let noise = NoiseModel::symmetric(3, 0.3).unwrap();
        let spec = RiskSpec::new(LossKind::InfoNce, 1, 1, pop, Some(noise), encoder(2)).unwrap();
        assert!(matches!(symmetric_noise_check(&spec, 1e-10), Err(Error::HypothesisRejected(_))));
        assert!(matches!(row_product_noise_check(&spec, 1e-10), Err(Error::HypothesisRejected(_))));
    }

    #[test]
    fn circulant_identity_and_symmetric_special_case() {
        let pop = population(3, 2, 6);
        let circ = NoiseModel::circulant(3, &[0.7, 0.3, 0.0]).unwrap();
        let spec = RiskSpec::new(LossKind::SymNce { beta: 1.0 }, 1, 2, pop.clone(), Some(circ), encoder(8)).unwrap();
        assert!(row_product_noise_check(&spec, 1e-10).unwrap().pass);

        let sym = NoiseModel::symmetric(3, 0.3).unwrap();
        let spec = RiskSpec::new(LossKind::InfoNce, 1, 2, pop.clone(), Some(sym), encoder(8)).unwrap();
        let a = symmetric_noise_check(&spec, 1e-10).unwrap();
        let b = row_product_noise_check(&spec, 1e-10).unwrap();
        assert!((a.rhs - b.rhs).abs() < 1e-12);

        let ident = NoiseModel::identity(3).unwrap();
        assert_eq!(ident.row_products(1e-12).unwrap(), (1.0, 0.0));

        let flips = NoiseModel::pair_flip(3, &[(0, 1)], 0.4).unwrap();
        let spec = RiskSpec::new(LossKind::InfoNce, 1, 1, pop, Some(flips), encoder(8)).unwrap();
        assert!(matches!(row_product_noise_check(&spec, 1e-10), Err(Error::HypothesisViolated(_))));
    }

    #[test]
    fn limit_gap_for_constant_encoder_is_the_finite_k_offset() {
        // a constant encoder scores log(K + 1) + 0 exactly, so the gap to
        // log K is log(1 + 1/K) and only vanishes as K grows
        let pop = population(2, 3, 0);
        let rows = limit_delta_check(&constant_encoder(), &pop, LossKind::SymNce { beta: 1.0 }, &[(2, 2), (8, 8)], 200, 1)
            .unwrap();
        for row in rows {
            assert_eq!(row.stderr, 0.0);
            assert!((row.gap - (1.0 + 1.0 / row.k as f64).ln()).abs() < 1e-12, "{row:?}");
        }
        assert!(limit_delta_check(&constant_encoder(), &pop, LossKind::InfoNce, &[(4, 4), (2, 2)], 200, 1).is_err());
    }

    #[test]
    fn nn_constant_encoder() {
        let sol = nn_threshold_solve(&constant_encoder(), &population(2, 3, 0), 1e-6, 60).unwrap();
        assert_eq!(sol.threshold, -1.0);
        assert!(sol.residual < 1e-12);
        assert_eq!(sol.status, NnStatus::Root);
    }

    fn two_clusters() -> (Encoder, FinitePopulation) {
        // five points per cluster, each cluster spread by at most 0.04 rad
        // inside its own coordinate plane, so every cross pair is orthogonal
        let n = 10;
        let params: Vec<f64> = (0..n)
            .flat_map(|j| {
                let a = 0.01 * (j % 5) as f64;
                if j < 5 {
                    [a.cos(), 0.0, a.sin(), 0.0]
                } else {
                    [0.0, a.cos(), 0.0, a.sin()]
                }
            })
            .collect();
        let cfg = RepresentationConfig::new(4, 1.0, true).unwrap();
        let enc = Encoder::from_parameters(EncoderKind::EmbeddingTable, vec![n, 4], cfg, params).unwrap();
        let features = (0..n).map(|j| vec![j as f64]).collect();
        let labels = (0..n).map(|j| j / 5).collect();
        (enc, FinitePopulation::from_labeled(features, labels, 2).unwrap())
    }

    #[test]
    fn nn_threshold_separates_clusters_and_matches_grid_scan() {
        let (enc, pop) = two_clusters();
        let sol = nn_threshold_solve(&enc, &pop, 1e-6, 60).unwrap();
        let emb = enc.embed_population(&pop).unwrap();
        let cross = (0..5)
            .flat_map(|a| (5..10).map(move |b| (a, b)))
            .map(|(a, b)| crate::embedding::dot(&emb[a], &emb[b]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(sol.threshold > cross, "{sol:?} vs cross {cross}");

        // first grid point where the gap stops being positive
        let first = (0..=2000)
            .map(|i| -1.0 + i as f64 * 1e-3)
            .find(|&t| nn_gap(&enc, &pop, t).unwrap().is_some_and(|g| g <= 1e-6))
            .unwrap();
        assert!((sol.threshold - first).abs() <= 1e-3 + 1e-9, "{} vs grid {first}", sol.threshold);
        assert!(nn_gap(&enc, &pop, sol.threshold).unwrap().unwrap() <= 1e-6);
    }
}
