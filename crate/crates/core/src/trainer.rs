//! SupCon-style training on synthetic populations, linear probing and
//! noise sweeps.

use std::collections::HashSet;
use std::io::Write;
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{inject_noise, make_gaussian_mixture, FinitePopulation, NoiseKind, NoiseModel};
use crate::embedding::{Encoder, EncoderKind, RepresentationConfig};
use crate::error::{Error, Result};
use crate::losses::{supcon_objective, LossKind, SupConBatchView};
use crate::rng;

/// Shape of the encoder trained by [`train_encoder`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Hidden width, used by the two-layer encoder only.
    pub hidden: usize,
    pub dim: usize,
    pub temperature: f64,
    pub normalize: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { kind: EncoderKind::TwoLayer, hidden: 32, dim: 8, temperature: 0.5, normalize: true }
    }
}

impl EncoderSpec {
    pub fn build(&self, input_dim: usize, seed: u64) -> Result<Encoder> {
        let cfg = RepresentationConfig::new(self.dim, self.temperature, self.normalize)?;
        match self.kind {
            EncoderKind::Linear => Encoder::linear(input_dim, cfg, seed),
            EncoderKind::TwoLayer => Encoder::two_layer(input_dim, self.hidden, cfg, seed),
            EncoderKind::EmbeddingTable => Err(Error::invalid("embedding tables cannot be trained on jittered views")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Leading epochs trained with the plain SupCon loss.
    pub warmup_epochs: usize,
    /// Standard deviation of the Gaussian jitter that makes each view.
    pub jitter: f64,
    pub seed: u64,
    pub encoder: EncoderSpec,
    pub probe_steps: usize,
    pub probe_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SymNce { beta: 1.0 },
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            warmup_epochs: 0,
            jitter: 1.0,
            seed: 0,
            encoder: EncoderSpec::default(),
            probe_steps: 200,
            probe_learning_rate: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 4 {
            return Err(Error::invalid(format!("batch size {} below 4", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid(format!("warmup {} exceeds {} epochs", self.warmup_epochs, self.epochs)));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::invalid(format!("jitter {} must be nonnegative", self.jitter)));
        }
        if !(self.probe_learning_rate > 0.0) {
            return Err(Error::invalid("probe learning rate must be positive"));
        }
        Ok(())
    }

    /// Loss used in `epoch`: SupCon during warmup, the configured loss after.
    pub fn loss_at(&self, epoch: usize) -> LossKind {
        if epoch < self.warmup_epochs {
            LossKind::SymNce { beta: 0.0 }
        } else {
            self.loss
        }
    }
}

/// Two jittered views per sample, laid out as all first views followed by
/// all second views, with the sample's label repeated.
#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// View `v` of sample `idx` adds `N(0, sigma^2 I)` drawn from stream `(seed, idx, v)`.
pub fn build_views(features: &[Vec<f64>], labels: &[usize], batch: &[usize], sigma: f64, seed: u64) -> Result<Views> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("jitter {sigma} must be nonnegative")));
    }
    let mut inputs = Vec::with_capacity(2 * batch.len());
    let mut out_labels = Vec::with_capacity(2 * batch.len());
    for view in 0..2u64 {
        for &idx in batch {
            let x = features.get(idx).ok_or_else(|| Error::invalid(format!("sample {idx} out of range")))?;
            let mut r = rng::stream(seed, &[idx as u64, view]);
            inputs.push(
                x.iter()
                    .map(|v| v + sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                    .collect(),
            );
            out_labels.push(labels[idx]);
        }
    }
    Ok(Views { inputs, labels: out_labels })
}

fn key(label: &str) -> u64 {
    rng::label_key(label)
}

/// Mini-batch momentum SGD on the batch objective. Returns the final
/// encoder and the mean batch loss of every epoch.
pub fn train_encoder(pop: &FinitePopulation, noisy_labels: &[usize], config: &TrainConfig) -> Result<(Encoder, Vec<f64>)> {
    config.validate()?;
    let n = pop.num_samples();
    if noisy_labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: noisy_labels.len() });
    }
    let mut encoder = config.encoder.build(pop.feature_dim(), rng::derive(config.seed, &[key("init")]))?;
    let tau = encoder.temperature();
    let mut velocity = vec![0.0; encoder.num_parameters()];
    let mut trace = Vec::with_capacity(config.epochs);
    let features = pop.features();

    for epoch in 0..config.epochs {
        let loss = config.loss_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(config.seed, &[key("shuffle"), epoch as u64]));
        let view_seed = rng::derive(config.seed, &[key("views"), epoch as u64]);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
            let views = build_views(features, noisy_labels, batch, config.jitter, view_seed)?;
            let traces = views.inputs.iter().map(|x| encoder.forward(x)).collect::<Result<Vec<_>>>()?;
            let embeddings = traces.iter().map(|t| t.output.clone()).collect();
            let out = supcon_objective(&SupConBatchView::new(embeddings, views.labels)?, loss, tau)?;
            if out.anchors_used == 0 {
                continue;
            }
            if !out.value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let mut grad = vec![0.0; encoder.num_parameters()];
            for (t, g) in traces.iter().zip(&out.grads) {
                encoder.accumulate_backward(t, g, &mut grad)?;
            }
            let params = encoder.parameters_mut();
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = config.momentum * *v + g;
                *p -= config.learning_rate * *v;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            total += out.value;
            batches += 1;
        }
        trace.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    Ok((encoder, trace))
}

/// Full-batch gradient descent for a softmax classifier on fixed features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], num_classes: usize, steps: usize, lr: f64) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: features.len(), found: labels.len() });
        }
        if features.is_empty() {
            return Err(Error::invalid("probe needs at least one sample"));
        }
        let d = features[0].len();
        let n = features.len() as f64;
        let mut weights = vec![vec![0.0; d]; num_classes];
        let mut bias = vec![0.0; num_classes];
        for step in 0..steps {
            let mut gw = vec![vec![0.0; d]; num_classes];
            let mut gb = vec![0.0; num_classes];
            let mut loss = 0.0;
            for (x, &y) in features.iter().zip(labels) {
                let probs = softmax(&logits(&weights, &bias, x));
                loss -= probs[y].max(f64::MIN_POSITIVE).ln();
                for c in 0..num_classes {
                    let e = probs[c] - if c == y { 1.0 } else { 0.0 };
                    gb[c] += e;
                    for (g, xi) in gw[c].iter_mut().zip(x) {
                        *g += e * xi;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: step });
            }
            for c in 0..num_classes {
                bias[c] -= lr * gb[c] / n;
                for (w, g) in weights[c].iter_mut().zip(&gw[c]) {
                    *w -= lr * g / n;
                }
            }
        }
        Ok(Self { weights, bias })
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = logits(&self.weights, &self.bias, x);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

fn logits(weights: &[Vec<f64>], bias: &[f64], x: &[f64]) -> Vec<f64> {
    weights.iter().zip(bias).map(|(w, b)| crate::embedding::dot(w, x) + b).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Trains a probe on frozen embeddings of the (noisily labelled) training
/// population and returns its accuracy on the clean test labels.
pub fn linear_probe(
    encoder: &Encoder,
    train: &FinitePopulation,
    train_labels: &[usize],
    test: &FinitePopulation,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let c = train.num_classes();
    let probe = LinearProbe::fit(&encoder.embed_all(train.features())?, train_labels, c, steps, lr)?;
    Ok(probe.accuracy(&encoder.embed_all(test.features())?, test.true_labels()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub loss: LossKind,
    pub gamma: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
    pub epochs: usize,
    pub loss_trace: Vec<f64>,
    pub probe_acc: f64,
    pub final_train_loss: f64,
    pub wall_secs: f64,
}

/// Synthetic population parameters for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self { num_classes: 10, dim: 20, n_per_class: 100, test_per_class: 100, separation: 3.0 }
    }
}

/// Loss families named in a sweep; each expands over its parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFamily {
    Supcon,
    Symnce,
    Revnce,
    Rince,
    InfonceNn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub population: PopulationSpec,
    pub noise_kind: NoiseKind,
    pub gammas: Vec<f64>,
    pub losses: Vec<LossFamily>,
    pub betas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Record wall-clock seconds in the CSV. Off by default so reruns are
    /// byte-identical.
    pub timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            population: PopulationSpec::default(),
            noise_kind: NoiseKind::Symmetric,
            gammas: vec![0.0, 0.2, 0.4, 0.6],
            losses: vec![LossFamily::Supcon, LossFamily::Symnce],
            betas: vec![1.0],
            lambdas: vec![1.0 / 11.0],
            thresholds: vec![0.5],
            seeds: vec![0, 1, 2, 3, 4],
            train: TrainConfig::default(),
            timing: false,
        }
    }
}

impl SweepConfig {
    pub fn expanded_losses(&self) -> Vec<LossKind> {
        let mut out = Vec::new();
        for family in &self.losses {
            match family {
                LossFamily::Supcon => out.push(LossKind::SymNce { beta: 0.0 }),
                LossFamily::Symnce => out.extend(self.betas.iter().map(|&beta| LossKind::SymNce { beta })),
                LossFamily::Revnce => out.push(LossKind::RevNce),
                LossFamily::Rince => out.extend(self.lambdas.iter().map(|&lambda| LossKind::Rince { lambda })),
                LossFamily::InfonceNn => out.extend(self.thresholds.iter().map(|&threshold| LossKind::InfoNceNn { threshold })),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.losses.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("gammas, losses and seeds must be nonempty"));
        }
        let losses = self.expanded_losses();
        if losses.is_empty() {
            return Err(Error::invalid("loss list expands to nothing; check betas, lambdas and thresholds"));
        }
        for loss in &losses {
            loss.validate()?;
        }
        for &g in &self.gammas {
            self.noise_model(g)?;
        }
        let p = &self.population;
        if p.num_classes < 2 || p.n_per_class < 2 || p.test_per_class < 1 || p.dim < 2 {
            return Err(Error::invalid("population needs C >= 2, p >= 2, n_per_class >= 2 and test samples"));
        }
        self.train.validate()
    }

    pub fn noise_model(&self, gamma: f64) -> Result<NoiseModel> {
        let c = self.population.num_classes;
        match self.noise_kind {
            NoiseKind::Symmetric => NoiseModel::symmetric(c, gamma),
            NoiseKind::Circulant => {
                let mut offsets = vec![0.0; c];
                offsets[0] = 1.0 - gamma;
                offsets[1] += gamma;
                NoiseModel::circulant(c, &offsets)
            }
            // class-pair flips c -> c + 1 for even c; not covered by the affine identities
            NoiseKind::Asymmetric => {
                let pairs: Vec<(usize, usize)> = (0..c.saturating_sub(1)).step_by(2).map(|j| (j, j + 1)).collect();
                NoiseModel::pair_flip(c, &pairs, gamma)
            }
        }
    }

    /// All cells in output order: gamma, then loss, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let losses = self.expanded_losses();
        let mut out = Vec::new();
        for &gamma in &self.gammas {
            for &loss in &losses {
                for &seed in &self.seeds {
                    out.push(Cell { loss, gamma, seed });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub loss: LossKind,
    pub gamma: f64,
    pub seed: u64,
}

/// Loss column: the family name, with the NN threshold appended.
pub fn loss_label(loss: &LossKind) -> String {
    match loss {
        LossKind::InfoNceNn { threshold } => format!("{}@{threshold}", loss.name()),
        _ => loss.name().to_string(),
    }
}

/// Loss description used in pivot tables.
pub fn loss_display(loss: &LossKind) -> String {
    match *loss {
        LossKind::SymNce { beta } if beta != 0.0 => format!("symnce(beta={beta})"),
        LossKind::Rince { lambda } => format!("rince(lambda={lambda})"),
        _ => loss_label(loss),
    }
}

pub const CSV_HEADER: [&str; 10] =
    ["loss", "beta", "lambda", "gamma", "noise_kind", "seed", "epochs", "probe_acc", "final_train_loss", "wall_secs"];

/// Identity of a cell inside a results CSV.
pub type CellKey = (String, String, String, String, String, String);

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Cell {
    pub fn key(&self, noise_kind: NoiseKind) -> CellKey {
        (
            loss_label(&self.loss),
            opt(self.loss.beta()),
            opt(self.loss.lambda()),
            self.gamma.to_string(),
            noise_kind.as_str().to_string(),
            self.seed.to_string(),
        )
    }
}

/// Outcome of one sweep cell; `result` is an error message when training failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: Cell,
    pub result: std::result::Result<ExperimentResult, String>,
}

impl CellOutcome {
    pub fn csv_record(&self, config: &SweepConfig) -> Vec<String> {
        let (loss, beta, lambda, gamma, kind, seed) = self.cell.key(config.noise_kind);
        let (acc, fin, wall) = match &self.result {
            Ok(r) => (
                r.probe_acc.to_string(),
                r.final_train_loss.to_string(),
                if config.timing { format!("{:.3}", r.wall_secs) } else { String::new() },
            ),
            Err(_) => (String::new(), String::new(), String::new()),
        };
        vec![loss, beta, lambda, gamma, kind, seed, config.train.epochs.to_string(), acc, fin, wall]
    }

    pub fn diverged(&self) -> bool {
        self.result.is_err()
    }
}

/// Runs one cell: fresh populations and noise per `(gamma, seed)`.
pub fn run_cell(config: &SweepConfig, cell: Cell) -> std::result::Result<ExperimentResult, Error> {
    let start = Instant::now();
    let p = &config.population;
    let train = make_gaussian_mixture(p.num_classes, p.dim, p.n_per_class, p.separation, rng::derive(cell.seed, &[key("train")]))?;
    let test =
        make_gaussian_mixture(p.num_classes, p.dim, p.test_per_class, p.separation, rng::derive(cell.seed, &[key("test")]))?;
    let noise = config.noise_model(cell.gamma)?;
    let noise_seed = rng::derive(cell.seed, &[key("noise"), cell.gamma.to_bits()]);
    let noisy = inject_noise(train.true_labels(), &noise, noise_seed)?;
    let train_cfg = TrainConfig { loss: cell.loss, seed: cell.seed, ..config.train };
    let (encoder, trace) = train_encoder(&train, &noisy, &train_cfg)?;
    let probe_acc = linear_probe(&encoder, &train, &noisy, &test, train_cfg.probe_steps, train_cfg.probe_learning_rate)?;
    Ok(ExperimentResult {
        loss: cell.loss,
        gamma: cell.gamma,
        noise_kind: config.noise_kind,
        seed: cell.seed,
        epochs: train_cfg.epochs,
        final_train_loss: trace.last().copied().unwrap_or(f64::NAN),
        loss_trace: trace,
        probe_acc,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs every cell not in `skip`, in parallel on the current rayon pool,
/// and hands outcomes to `sink` in cell order as soon as each prefix is done.
pub fn run_noise_sweep<F>(config: &SweepConfig, skip: &HashSet<CellKey>, mut sink: F) -> Result<Vec<CellOutcome>>
where
    F: FnMut(&CellOutcome) -> Result<()>,
{
    config.validate()?;
    let cells: Vec<Cell> = config.cells().into_iter().filter(|c| !skip.contains(&c.key(config.noise_kind))).collect();
    let (tx, rx) = mpsc::channel::<(usize, CellOutcome)>();
    let mut ordered = Vec::with_capacity(cells.len());
    std::thread::scope(|scope| -> Result<()> {
        let cells_ref = &cells;
        scope.spawn(move || {
            cells_ref.par_iter().enumerate().for_each_with(tx, |tx, (i, &cell)| {
                let result = run_cell(config, cell).map_err(|e| e.to_string());
                let _ = tx.send((i, CellOutcome { cell, result }));
            });
        });
        let mut pending: Vec<Option<CellOutcome>> = vec![None; cells.len()];
        let mut next = 0;
        for (i, outcome) in rx {
            pending[i] = Some(outcome);
            while next < pending.len() {
                let Some(done) = pending[next].take() else { break };
                sink(&done)?;
                ordered.push(done);
                next += 1;
            }
        }
        Ok(())
    })?;
    Ok(ordered)
}

/// Writes the header (unless resuming) and streams rows to `out`.
pub fn csv_sink<W: Write>(writer: &mut csv::Writer<W>, config: &SweepConfig, outcome: &CellOutcome) -> Result<()> {
    writer.write_record(outcome.csv_record(config))?;
    writer.flush()?;
    Ok(())
}

/// Cell keys already present in a results CSV.
pub fn completed_cells<R: std::io::Read>(input: R) -> Result<HashSet<CellKey>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut done = HashSet::new();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or_default().to_string();
        done.insert((get(0), get(1), get(2), get(3), get(4), get(5)));
    }
    Ok(done)
}

/// Median probe accuracy per `(loss, gamma)`; rows follow the expanded loss
/// order, columns the gamma order of the config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pivot {
    pub gammas: Vec<f64>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

pub fn pivot(config: &SweepConfig, outcomes: &[CellOutcome]) -> Pivot {
    let gammas = config.gammas.clone();
    let rows = config
        .expanded_losses()
        .iter()
        .map(|loss| {
            let cols = gammas
                .iter()
                .map(|&g| {
                    let mut accs: Vec<f64> = outcomes
                        .iter()
                        .filter(|o| o.cell.loss == *loss && o.cell.gamma == g)
                        .filter_map(|o| o.result.as_ref().ok().map(|r| r.probe_acc))
                        .collect();
                    median(&mut accs)
                })
                .collect();
            (loss_display(loss), cols)
        })
        .collect();
    Pivot { gammas, rows }
}

impl std::fmt::Display for Pivot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(4).max(4);
        write!(f, "{:<width$}", "loss")?;
        for g in &self.gammas {
            write!(f, "  {:>8}", format!("g={g}"))?;
        }
        writeln!(f)?;
        for (label, cols) in &self.rows {
            write!(f, "{label:<width$}")?;
            for c in cols {
                match c {
                    Some(v) => write!(f, "  {v:>8.4}")?,
                    None => write!(f, "  {:>8}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_pop(seed: u64, sep: f64) -> FinitePopulation {
        make_gaussian_mixture(2, 4, 20, sep, seed).unwrap()
    }

    #[test]
    fn views_layout_and_determinism() {
        let pop = small_pop(0, 2.0);
        let batch = [3, 7, 11];
        let plain = build_views(pop.features(), pop.true_labels(), &batch, 0.0, 5).unwrap();
        for (v, slot) in [(0, 0), (1, 3)] {
            for (j, &idx) in batch.iter().enumerate() {
                assert_eq!(plain.inputs[slot + j], pop.features()[idx], "view {v}");
                assert_eq!(plain.labels[slot + j], pop.true_labels()[idx]);
            }
        }
        let a = build_views(pop.features(), pop.true_labels(), &batch, 0.1, 5).unwrap();
        let b = build_views(pop.features(), pop.true_labels(), &batch, 0.1, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inputs[0], a.inputs[3]);
        assert!(build_views(pop.features(), pop.true_labels(), &batch, -0.1, 5).is_err());
    }

    #[test]
    fn jitter_has_zero_mean() {
        let features = vec![vec![0.5, -1.0]; 5000];
        let labels = vec![0; 5000];
        let batch: Vec<usize> = (0..5000).collect();
        let views = build_views(&features, &labels, &batch, 0.1, 9).unwrap();
        for coord in 0..2 {
            let mean = views.inputs.iter().map(|x| x[coord] - features[0][coord]).sum::<f64>() / 10_000.0;
            assert!(mean.abs() < 4.0 * 0.1 / 100.0);
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { batch_size: 3, ..ok }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 61, ..ok }.validate().is_err());
        assert!(TrainConfig { loss: LossKind::SymNce { beta: 2.0 }, ..ok }.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_encoder() {
        let pop = small_pop(1, 2.0);
        let cfg = TrainConfig { epochs: 0, seed: 4, ..TrainConfig::default() };
        let (enc, trace) = train_encoder(&pop, pop.true_labels(), &cfg).unwrap();
        assert!(trace.is_empty());
        let init = cfg.encoder.build(4, rng::derive(4, &[key("init")])).unwrap();
        assert_eq!(enc, init);
    }

    #[test]
    fn training_is_deterministic_and_warmup_matches_supcon() {
        let pop = small_pop(2, 2.0);
        let base = TrainConfig { epochs: 3, batch_size: 8, seed: 3, ..TrainConfig::default() };
        let sym = TrainConfig { loss: LossKind::SymNce { beta: 1.0 }, warmup_epochs: 3, ..base };
        let sup = TrainConfig { loss: LossKind::SymNce { beta: 0.0 }, ..base };
        let a = train_encoder(&pop, pop.true_labels(), &sym).unwrap();
        let b = train_encoder(&pop, pop.true_labels(), &sym).unwrap();
        let c = train_encoder(&pop, pop.true_labels(), &sup).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.1.len(), 3);
    }

    #[test]
    fn training_separates_two_classes() {
        let pop = small_pop(3, 3.0);
        let cfg = TrainConfig { loss: LossKind::SymNce { beta: 0.0 }, epochs: 50, batch_size: 16, ..TrainConfig::default() };
        let (enc, trace) = train_encoder(&pop, pop.true_labels(), &cfg).unwrap();
        assert!(trace.last().unwrap() < trace.first().unwrap());
        let emb = enc.embed_population(&pop).unwrap();
        let labels = pop.true_labels();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for a in 0..emb.len() {
            for b in a + 1..emb.len() {
                let s = crate::embedding::dot(&emb[a], &emb[b]);
                if labels[a] == labels[b] {
                    intra += s;
                    ni += 1;
                } else {
                    inter += s;
                    nx += 1;
                }
            }
        }
        assert!(intra / ni as f64 - inter / nx as f64 >= 0.3);
    }

    /// Classifies by the nearest class mean.
    fn nearest_centroid_accuracy(x: &[Vec<f64>], y: &[usize], c: usize) -> f64 {
        let d = x[0].len();
        let mut means = vec![vec![0.0; d]; c];
        let mut counts = vec![0.0; c];
        for (v, &l) in x.iter().zip(y) {
            counts[l] += 1.0;
            for (m, vi) in means[l].iter_mut().zip(v) {
                *m += vi;
            }
        }
        for (m, n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n);
        }
        let hits = x
            .iter()
            .zip(y)
            .filter(|(v, &l)| {
                let dist = |m: &Vec<f64>| m.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (0..c).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap() == l
            })
            .count();
        hits as f64 / y.len() as f64
    }

    #[test]
    fn probe_fits_separable_embeddings() {
        let x: Vec<Vec<f64>> = (0..60).map(|j| vec![(j % 3) as f64 + 0.01 * j as f64, 1.0 - (j % 3) as f64]).collect();
        let y: Vec<usize> = (0..60).map(|j| j % 3).collect();
        assert!(nearest_centroid_accuracy(&x, &y, 3) >= 0.99);
        let probe = LinearProbe::fit(&x, &y, 3, 500, 0.5).unwrap();
        assert!(probe.accuracy(&x, &y) >= 0.99);

        let mut order: Vec<usize> = (0..60).collect();
        order.reverse();
        let xr: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
        let yr: Vec<usize> = order.iter().map(|&i| y[i]).collect();
        assert_eq!(probe.accuracy(&x, &y), probe.accuracy(&xr, &yr));
    }

    #[test]
    fn probe_is_at_chance_without_signal() {
        let pop = make_gaussian_mixture(4, 6, 100, 0.0, 1).unwrap();
        let test = make_gaussian_mixture(4, 6, 100, 0.0, 2).unwrap();
        let enc = EncoderSpec::default().build(6, 3).unwrap();
        let acc = linear_probe(&enc, &pop, pop.true_labels(), &test, 200, 0.5).unwrap();
        assert!((acc - 0.25).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn loss_expansion_and_cells() {
        let cfg = SweepConfig {
            losses: vec![LossFamily::Supcon, LossFamily::Symnce, LossFamily::InfonceNn],
            betas: vec![0.5, 1.0],
            thresholds: vec![0.2],
            gammas: vec![0.0, 0.4],
            seeds: vec![1, 2],
            ..SweepConfig::default()
        };
        assert_eq!(
            cfg.expanded_losses(),
            vec![
                LossKind::SymNce { beta: 0.0 },
                LossKind::SymNce { beta: 0.5 },
                LossKind::SymNce { beta: 1.0 },
                LossKind::InfoNceNn { threshold: 0.2 }
            ]
        );
        assert_eq!(cfg.cells().len(), 2 * 4 * 2);
        assert_eq!(loss_label(&LossKind::InfoNceNn { threshold: 0.2 }), "infonce-nn@0.2");
    }

    fn small_sweep(gammas: Vec<f64>) -> SweepConfig {
        SweepConfig {
            population: PopulationSpec { num_classes: 4, dim: 8, n_per_class: 40, test_per_class: 50, separation: 3.0 },
            gammas,
            losses: vec![LossFamily::Supcon, LossFamily::Symnce],
            betas: vec![1.0],
            seeds: vec![0, 1, 2, 3, 4],
            train: TrainConfig { epochs: 30, batch_size: 32, ..TrainConfig::default() },
            ..SweepConfig::default()
        }
    }

    #[test]
    fn sweep_accuracy_degrades_with_noise_and_supcon_holds_up_on_clean_data() {
        let cfg = small_sweep(vec![0.0, 0.2, 0.4, 0.6]);
        let outcomes = run_noise_sweep(&cfg, &HashSet::new(), |_| Ok(())).unwrap();
        let table = pivot(&cfg, &outcomes);
        for (name, cols) in &table.rows {
            let accs: Vec<f64> = cols.iter().map(|c| c.unwrap()).collect();
            let rises: Vec<f64> = accs.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
            assert!(rises.len() <= 1 && rises.iter().all(|d| *d <= 0.01), "{name}: {accs:?}");
        }
        let clean = |row: usize| table.rows[row].1[0].unwrap();
        assert!(clean(0) >= clean(1) - 0.05, "{table}");
    }

    #[test]
    fn identical_seeds_give_identical_rows() {
        let mut cfg = small_sweep(vec![0.4]);
        cfg.seeds = vec![3, 3];
        cfg.train.epochs = 3;
        let outcomes = run_noise_sweep(&cfg, &HashSet::new(), |_| Ok(())).unwrap();
        for pair in outcomes.chunks(2) {
            assert_eq!(pair[0].csv_record(&cfg), pair[1].csv_record(&cfg));
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
