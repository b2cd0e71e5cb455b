//! Command-line front end for the `symnce` binary.
//!
//! Structured settings come from a JSON config; flags only carry paths, the
//! seed and the worker count. Exit codes: 0 all checks pass, 1 an identity
//! check failed, 2 bad config or input, 3 training diverged.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::distribution::{
    inject_noise, make_gaussian_mixture, read_population_file, FinitePopulation, NoiseKind, NoiseModel,
};
use crate::embedding::{Encoder, RepresentationConfig};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::risk::{
    delta_risk_exact, exp_moment, limit_delta_check, nn_threshold_solve, noisy_risk_by_class_pairs, noisy_risk_exact,
    row_product_noise_check, symmetric_noise_check, LimitRow, NnSolution, RiskSpec, TheoremCheckReport,
};
use crate::rng;
use crate::trainer::{
    completed_cells, csv_sink, linear_probe, pivot, run_noise_sweep, train_encoder, EncoderSpec, PopulationSpec,
    SweepConfig, TrainConfig, CSV_HEADER,
};
use crate::VERSION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "symnce", version, about = "Robust contrastive losses: identity checks and noise sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the exact identity suite and the limit convergence table.
    Verify(CommonArgs),
    /// Train and probe over a grid of noise rates, losses and seeds.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Keep rows already in the output CSV and run only missing cells.
        #[arg(long)]
        resume: bool,
    },
    /// Train one encoder and save a checkpoint.
    Train(CommonArgs),
    /// Linear-probe a saved encoder.
    Probe(CommonArgs),
    /// Find the neighbour threshold that zeroes the thresholded InfoNCE gap.
    SolveNn(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Verify(c) => with_pool(&c, || cmd_verify(&c)),
        Command::Sweep { common, resume } => with_pool(&common, || cmd_sweep(&common, resume)),
        Command::Train(c) => with_pool(&c, || cmd_train(&c)),
        Command::Probe(c) => with_pool(&c, || cmd_probe(&c)),
        Command::SolveNn(c) => with_pool(&c, || cmd_solve_nn(&c)),
    }
}

fn with_pool<F: FnOnce() -> Result<i32> + Send>(args: &CommonArgs, f: F) -> Result<i32> {
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(Error::MalformedConfig("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Reads a JSON config, reporting the file, line and column of any problem.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::MalformedConfig(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedConfig(format!("{}: {e}", path.display())))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::MalformedConfig(format!("output directory {}: {e}", dir.display())))
}

/// Envelope written around every JSON report.
#[derive(Debug, Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    version: &'static str,
    command: &'a str,
    config: &'a C,
    results: R,
}

fn write_report<C: Serialize, R: Serialize>(dir: &Path, command: &str, config: &C, results: R) -> Result<()> {
    let report = Report { version: VERSION, command, config, results };
    let path = dir.join(format!("{command}.json"));
    fs::write(path, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    if cfg!(test) {
        print!("{text}");
    } else {
        let _ = std::io::stdout().write_all(text.as_bytes());
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidParameter(msg) => Error::MalformedConfig(msg),
        other => other,
    }
}

// ---------------------------------------------------------------- verify

/// Monte Carlo convergence table settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitConfig {
    pub loss: LossKind,
    pub schedule: Vec<(usize, usize)>,
    pub n_samples: usize,
    pub classes: usize,
    pub points_per_class: usize,
}

impl Default for LimitConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SymNce { beta: 1.0 },
            schedule: vec![(4, 4), (16, 16), (64, 64)],
            n_samples: 20_000,
            classes: 3,
            points_per_class: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub classes: Vec<usize>,
    pub points_per_class: usize,
    pub feature_dim: usize,
    /// Noise rates; when absent each `C` uses `{0, 0.1, 0.3, 0.5, 0.8 (C-1)/C}`.
    pub gammas: Option<Vec<f64>>,
    pub ks: Vec<usize>,
    pub losses: Vec<LossKind>,
    pub encoders: usize,
    /// Class priors for every population; uniform when absent.
    pub priors: Option<Vec<f64>>,
    pub tolerance: f64,
    pub circulant_offsets: Vec<f64>,
    pub rince_k: usize,
    /// RINCE weights; when absent `{0.08, 0.09, 1/(K+1), 0.11}`.
    pub lambdas: Option<Vec<f64>>,
    pub limit: Option<LimitConfig>,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            classes: vec![2, 3],
            points_per_class: 3,
            feature_dim: 3,
            gammas: None,
            ks: vec![1, 2],
            losses: vec![
                LossKind::InfoNce,
                LossKind::RevNce,
                LossKind::SymNce { beta: 1.0 },
                LossKind::Rince { lambda: 0.3 },
                LossKind::InfoNceNn { threshold: 0.0 },
            ],
            encoders: 2,
            priors: None,
            tolerance: 1e-10,
            circulant_offsets: vec![0.7, 0.3, 0.0],
            rince_k: 10,
            lambdas: None,
            limit: Some(LimitConfig::default()),
            seed: 0,
        }
    }
}

impl VerifyConfig {
    pub fn gamma_grid(&self, c: usize) -> Vec<f64> {
        self.gammas.clone().unwrap_or_else(|| {
            let top = (c as f64 - 1.0) / c as f64;
            vec![0.0, 0.1, 0.3, 0.5, 0.8 * top]
        })
    }

    pub fn lambda_grid(&self) -> Vec<f64> {
        self.lambdas.clone().unwrap_or_else(|| vec![0.08, 0.09, 1.0 / (self.rince_k as f64 + 1.0), 0.11])
    }

    fn validate(&self) -> Result<()> {
        if self.classes.iter().any(|&c| c < 2) || self.classes.is_empty() {
            return Err(Error::invalid("classes must be a nonempty list of values >= 2"));
        }
        if self.points_per_class == 0 || self.feature_dim == 0 || self.encoders == 0 {
            return Err(Error::invalid("points_per_class, feature_dim and encoders must be positive"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) || self.rince_k == 0 {
            return Err(Error::invalid("K values must be positive"));
        }
        for loss in &self.losses {
            loss.validate()?;
        }
        if let Some(p) = &self.priors {
            if self.classes.iter().any(|&c| c != p.len()) {
                return Err(Error::invalid("priors length must match every entry of classes"));
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        Ok(())
    }
}

/// Population of `c * per_class` random points with random within-class
/// weights, used as the identity suite's test bed.
pub fn random_population(c: usize, per_class: usize, dim: usize, priors: Option<&[f64]>, seed: u64) -> Result<FinitePopulation> {
    let mut r = rng::stream(seed, &[rng::label_key("population")]);
    let n = c * per_class;
    let features: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.5..1.5)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|j| j / per_class).collect();
    let conditionals = (0..c)
        .map(|class| {
            let w: Vec<f64> = (0..n).map(|j| if labels[j] == class { r.random_range(0.5..1.5) } else { 0.0 }).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        })
        .collect();
    let priors = priors.map_or_else(|| vec![1.0 / c as f64; c], <[f64]>::to_vec);
    FinitePopulation::new(features, labels, priors, conditionals)
}

fn random_encoder(input_dim: usize, seed: u64) -> Result<Encoder> {
    Encoder::two_layer(input_dim, 5, RepresentationConfig::new(4, 1.0, true)?, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub theorem: String,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub gamma: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub loss: String,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub residual: Option<f64>,
    pub tolerance: f64,
    pub status: CheckStatus,
    pub note: Option<String>,
}

impl From<TheoremCheckReport> for VerifyRow {
    fn from(r: TheoremCheckReport) -> Self {
        Self {
            theorem: r.theorem,
            num_classes: r.num_classes,
            gamma: r.gamma,
            m: r.m,
            k: r.k,
            loss: r.loss,
            lhs: Some(r.lhs),
            rhs: Some(r.rhs),
            residual: Some(r.residual),
            tolerance: r.tolerance,
            status: if r.pass { CheckStatus::Pass } else { CheckStatus::Fail },
            note: None,
        }
    }
}

impl VerifyRow {
    fn compare(theorem: &str, spec: &RiskSpec, gamma: Option<f64>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        TheoremCheckReport::new(theorem, spec, gamma, lhs, rhs, tolerance).into()
    }

    fn skipped(theorem: &str, spec: &RiskSpec, gamma: Option<f64>, tolerance: f64, why: &Error) -> Self {
        Self {
            theorem: theorem.to_string(),
            num_classes: spec.num_classes(),
            gamma,
            m: spec.m,
            k: spec.k,
            loss: spec.loss.name().to_string(),
            lhs: None,
            rhs: None,
            residual: None,
            tolerance,
            status: CheckStatus::Skipped,
            note: Some(why.to_string()),
        }
    }

    fn csv_record(&self) -> Vec<String> {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.theorem.clone(),
            self.num_classes.to_string(),
            o(self.gamma),
            self.m.to_string(),
            self.k.to_string(),
            self.loss.clone(),
            o(self.lhs),
            o(self.rhs),
            o(self.residual),
            match self.status {
                CheckStatus::Pass => "true".into(),
                CheckStatus::Fail => "false".into(),
                CheckStatus::Skipped => "skipped".into(),
            },
        ]
    }
}

fn gated(theorem: &str, spec: &RiskSpec, gamma: Option<f64>, tol: f64, r: Result<TheoremCheckReport>) -> Result<VerifyRow> {
    match r {
        Ok(report) => Ok(report.into()),
        Err(e @ (Error::HypothesisRejected(_) | Error::HypothesisViolated(_))) => Ok(VerifyRow::skipped(theorem, spec, gamma, tol, &e)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyResults {
    pub checks: Vec<VerifyRow>,
    pub limit: Vec<LimitRow>,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
}

/// Runs the full identity suite described by `config`.
pub fn verify_suite(config: &VerifyConfig) -> Result<VerifyResults> {
    config.validate()?;
    let tol = config.tolerance;
    let mut checks = Vec::new();

    for &c in &config.classes {
        let pop = random_population(c, config.points_per_class, config.feature_dim, config.priors.as_deref(), rng::derive(config.seed, &[c as u64]))?;
        for e in 0..config.encoders {
            let enc = random_encoder(config.feature_dim, rng::derive(config.seed, &[c as u64, e as u64, 1]))?;
            for &gamma in &config.gamma_grid(c) {
                let noise = NoiseModel::symmetric(c, gamma)?;
                for &k in &config.ks {
                    for &loss in &config.losses {
                        let spec = RiskSpec::new(loss, 1, k, pop.clone(), Some(noise.clone()), enc.clone())?;
                        checks.push(gated("symmetric-affine", &spec, Some(gamma), tol, symmetric_noise_check(&spec, tol))?);
                        let lhs = noisy_risk_by_class_pairs(&spec)?;
                        let rhs = noisy_risk_exact(&spec)?;
                        checks.push(VerifyRow::compare("class-pair-decomposition", &spec, Some(gamma), lhs, rhs, tol));
                    }
                }
            }
        }
    }

    // transition matrices with constant row products
    let cc = config.circulant_offsets.len();
    if cc >= 2 {
        let noise = NoiseModel::circulant(cc, &config.circulant_offsets)?;
        let pop = random_population(cc, config.points_per_class, config.feature_dim, None, rng::derive(config.seed, &[cc as u64, 7]))?;
        for e in 0..config.encoders {
            let enc = random_encoder(config.feature_dim, rng::derive(config.seed, &[cc as u64, e as u64, 8]))?;
            for &k in &config.ks {
                for &loss in &config.losses {
                    let spec = RiskSpec::new(loss, 1, k, pop.clone(), Some(noise.clone()), enc.clone())?;
                    checks.push(gated("row-product-affine", &spec, None, tol, row_product_noise_check(&spec, tol))?);
                }
            }
        }
    }

    // RINCE additional risk against its closed form, and the lambda that zeroes it
    let k = config.rince_k;
    let pop = random_population(2, config.points_per_class, config.feature_dim, None, rng::derive(config.seed, &[k as u64, 9]))?;
    let enc = random_encoder(config.feature_dim, rng::derive(config.seed, &[k as u64, 10]))?;
    let moment = exp_moment(&enc.embed_population(&pop)?, &pop.marginal(), enc.temperature());
    let mut best: Option<(f64, f64)> = None;
    let mut last_spec = None;
    for &lambda in &config.lambda_grid() {
        let spec = RiskSpec::new(LossKind::Rince { lambda }, 1, k, pop.clone(), None, enc.clone())?;
        let delta = delta_risk_exact(&spec)?;
        let closed = ((k as f64 + 1.0) * lambda - 1.0) * moment;
        checks.push(VerifyRow::compare("rince-closed-form", &spec, None, delta, closed, tol));
        if best.is_none_or(|(_, d)| delta.abs() < d) {
            best = Some((lambda, delta.abs()));
        }
        last_spec = Some(spec);
    }
    if let (Some((argmin, _)), Some(spec)) = (best, last_spec) {
        let target = 1.0 / (k as f64 + 1.0);
        checks.push(VerifyRow::compare("rince-lambda-argmin", &spec, None, argmin, target, 1e-12));
    }

    let limit = match &config.limit {
        Some(l) => {
            let pop = random_population(l.classes, l.points_per_class, config.feature_dim, None, rng::derive(config.seed, &[11]))?;
            let enc = random_encoder(config.feature_dim, rng::derive(config.seed, &[12]))?;
            limit_delta_check(&enc, &pop, l.loss, &l.schedule, l.n_samples, config.seed)?
        }
        None => Vec::new(),
    };

    let count = |s: CheckStatus| checks.iter().filter(|r| r.status == s).count();
    let (passed, failed, skipped) = (count(CheckStatus::Pass), count(CheckStatus::Fail), count(CheckStatus::Skipped));
    Ok(VerifyResults { checks, limit, passed, failed, skipped })
}

pub const VERIFY_HEADER: [&str; 10] = ["theorem", "C", "gamma", "M", "K", "loss", "lhs", "rhs", "residual", "pass"];

fn cmd_verify(args: &CommonArgs) -> Result<i32> {
    let mut config: VerifyConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    prepare_out(&args.out)?;
    let results = verify_suite(&config).map_err(config_error)?;

    let mut w = csv::Writer::from_path(args.out.join("verify.csv"))?;
    w.write_record(VERIFY_HEADER)?;
    for row in &results.checks {
        w.write_record(row.csv_record())?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(args.out.join("limit.csv"))?;
    w.write_record(["M", "K", "estimate", "stderr", "target", "gap"])?;
    for r in &results.limit {
        w.write_record([r.m, r.k].map(|v| v.to_string()).into_iter().chain([r.estimate, r.stderr, r.target, r.gap].map(|v| v.to_string())))?;
    }
    w.flush()?;
    write_report(&args.out, "verify", &config, &results)?;

    emit(&verify_table(&results));
    if let Some(first) = results.checks.iter().find(|r| r.status == CheckStatus::Fail) {
        eprintln!(
            "first failure: {} C={} gamma={:?} K={} loss={} residual={:?}",
            first.theorem, first.num_classes, first.gamma, first.k, first.loss, first.residual
        );
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

fn verify_table(results: &VerifyResults) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let mut groups: Vec<(String, usize, usize, usize, f64)> = Vec::new();
    for r in &results.checks {
        let i = match groups.iter().position(|g| g.0 == r.theorem) {
            Some(i) => i,
            None => {
                groups.push((r.theorem.clone(), 0, 0, 0, 0.0));
                groups.len() - 1
            }
        };
        let g = &mut groups[i];
        match r.status {
            CheckStatus::Pass => g.1 += 1,
            CheckStatus::Fail => g.2 += 1,
            CheckStatus::Skipped => g.3 += 1,
        }
        g.4 = g.4.max(r.residual.unwrap_or(0.0));
    }
    let _ = writeln!(out, "{:<26} {:>6} {:>6} {:>8} {:>13}", "check", "pass", "fail", "skipped", "max residual");
    for (name, p, f, s, worst) in &groups {
        let _ = writeln!(out, "{name:<26} {p:>6} {f:>6} {s:>8} {worst:>13.3e}");
    }
    if !results.limit.is_empty() {
        out.push('\n');
        let _ = writeln!(out, "{:>5} {:>5} {:>12} {:>10} {:>12} {:>10}", "M", "K", "estimate", "stderr", "target", "gap");
        for r in &results.limit {
            let _ = writeln!(out, "{:>5} {:>5} {:>12.6} {:>10.2e} {:>12.6} {:>10.2e}", r.m, r.k, r.estimate, r.stderr, r.target, r.gap);
        }
    }
    out
}

// ---------------------------------------------------------------- sweep

fn cmd_sweep(args: &CommonArgs, resume: bool) -> Result<i32> {
    let mut config: SweepConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    config.validate().map_err(config_error)?;
    prepare_out(&args.out)?;
    let path = args.out.join("sweep.csv");

    let skip = if resume && path.exists() { completed_cells(fs::File::open(&path)?)? } else { HashSet::new() };
    let file = if resume && path.exists() {
        fs::OpenOptions::new().append(true).open(&path)?
    } else {
        let mut f = fs::File::create(&path)?;
        let mut header = csv::Writer::from_writer(Vec::new());
        header.write_record(CSV_HEADER)?;
        f.write_all(&header.into_inner().map_err(|e| Error::invalid(e.to_string()))?)?;
        f
    };
    let mut writer = csv::Writer::from_writer(file);
    let outcomes = run_noise_sweep(&config, &skip, |o| csv_sink(&mut writer, &config, o))?;

    let table = pivot(&config, &outcomes);
    emit(&table.to_string());
    fs::write(args.out.join("pivot.txt"), table.to_string())?;
    let failures: Vec<String> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().err().map(|e| format!("{} gamma={} seed={}: {e}", o.cell.loss.name(), o.cell.gamma, o.cell.seed)))
        .collect();
    #[derive(Serialize)]
    struct SweepResults<'a> {
        cells_run: usize,
        cells_skipped: usize,
        failures: &'a [String],
        pivot: &'a crate::trainer::Pivot,
    }
    write_report(
        &args.out,
        "sweep",
        &config,
        SweepResults { cells_run: outcomes.len(), cells_skipped: skip.len(), failures: &failures, pivot: &table },
    )?;
    for f in &failures {
        eprintln!("diverged: {f}");
    }
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_DIVERGED })
}

// ---------------------------------------------------------------- train / probe

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub population: PopulationSpec,
    /// CSV files with `feature_0..feature_{p-1},label` rows; they replace the
    /// generated mixture when given.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub noise_kind: NoiseKind,
    pub gamma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { population: PopulationSpec::default(), train_csv: None, test_csv: None, noise_kind: NoiseKind::Symmetric, gamma: 0.0 }
    }
}

/// Training data, its noisy labels and the clean test split.
pub struct Data {
    pub train: FinitePopulation,
    pub noisy_labels: Vec<usize>,
    pub test: FinitePopulation,
}

impl DataConfig {
    /// Same generation scheme as a sweep cell with this seed.
    pub fn load(&self, seed: u64) -> Result<Data> {
        let p = &self.population;
        let load = |path: &Option<PathBuf>, key: &str, per_class: usize| match path {
            Some(path) => read_population_file(path, Some(p.num_classes)),
            None => make_gaussian_mixture(p.num_classes, p.dim, per_class, p.separation, rng::derive(seed, &[rng::label_key(key)])),
        };
        let train = load(&self.train_csv, "train", p.n_per_class)?;
        let test = load(&self.test_csv, "test", p.test_per_class)?;
        let sweep = SweepConfig { population: *p, noise_kind: self.noise_kind, ..SweepConfig::default() };
        let noise = sweep.noise_model(self.gamma)?;
        let noisy_labels = inject_noise(train.true_labels(), &noise, rng::derive(seed, &[rng::label_key("noise"), self.gamma.to_bits()]))?;
        Ok(Data { train, noisy_labels, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainJob {
    pub data: DataConfig,
    pub train: TrainConfig,
}

fn cmd_train(args: &CommonArgs) -> Result<i32> {
    let mut job: TrainJob = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        job.train.seed = seed;
    }
    job.train.validate().map_err(config_error)?;
    prepare_out(&args.out)?;
    let data = job.data.load(job.train.seed).map_err(config_error)?;
    let (encoder, trace) = train_encoder(&data.train, &data.noisy_labels, &job.train)?;
    let acc = linear_probe(&encoder, &data.train, &data.noisy_labels, &data.test, job.train.probe_steps, job.train.probe_learning_rate)?;
    fs::write(args.out.join("encoder.json"), encoder.to_json()?)?;

    let mut w = csv::Writer::from_path(args.out.join("train.csv"))?;
    w.write_record(["epoch", "loss"])?;
    for (epoch, v) in trace.iter().enumerate() {
        w.write_record([epoch.to_string(), v.to_string()])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct TrainResults<'a> {
        loss_trace: &'a [f64],
        probe_acc: f64,
    }
    write_report(&args.out, "train", &job, TrainResults { loss_trace: &trace, probe_acc: acc })?;
    emit(&format!("epochs {}  final loss {:.6}  probe accuracy {acc:.4}\n", trace.len(), trace.last().copied().unwrap_or(f64::NAN)));
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeJob {
    pub data: DataConfig,
    /// Encoder checkpoint written by `train`.
    pub encoder: PathBuf,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeJob {
    fn default() -> Self {
        Self { data: DataConfig::default(), encoder: PathBuf::from("out/encoder.json"), steps: 200, learning_rate: 0.5, seed: 0 }
    }
}

fn load_encoder(path: &Path) -> Result<Encoder> {
    let text = fs::read_to_string(path).map_err(|e| Error::MalformedConfig(format!("{}: {e}", path.display())))?;
    Encoder::from_json(&text).map_err(|e| Error::MalformedConfig(format!("{}: {e}", path.display())))
}

fn cmd_probe(args: &CommonArgs) -> Result<i32> {
    let mut job: ProbeJob = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        job.seed = seed;
    }
    if !(job.learning_rate > 0.0) {
        return Err(Error::MalformedConfig("probe learning_rate must be positive".into()));
    }
    prepare_out(&args.out)?;
    let encoder = load_encoder(&job.encoder)?;
    let data = job.data.load(job.seed).map_err(config_error)?;
    let acc = linear_probe(&encoder, &data.train, &data.noisy_labels, &data.test, job.steps, job.learning_rate)?;
    let mut w = csv::Writer::from_path(args.out.join("probe.csv"))?;
    w.write_record(["gamma", "noise_kind", "seed", "steps", "probe_acc"])?;
    w.write_record([job.data.gamma.to_string(), job.data.noise_kind.as_str().into(), job.seed.to_string(), job.steps.to_string(), acc.to_string()])?;
    w.flush()?;
    write_report(&args.out, "probe", &job, acc)?;
    emit(&format!("probe accuracy {acc:.4}\n"));
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- solve-nn

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveNnJob {
    /// Encoder checkpoint; a random encoder of shape `random_encoder` is used
    /// when absent.
    pub encoder: Option<PathBuf>,
    pub random_encoder: EncoderSpec,
    pub data: DataConfig,
    pub tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SolveNnJob {
    fn default() -> Self {
        let mut data = DataConfig::default();
        data.population.n_per_class = 20;
        data.population.test_per_class = 2;
        Self { encoder: None, random_encoder: EncoderSpec::default(), data, tolerance: 1e-6, max_iter: 60, seed: 0 }
    }
}

fn cmd_solve_nn(args: &CommonArgs) -> Result<i32> {
    let mut job: SolveNnJob = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        job.seed = seed;
    }
    prepare_out(&args.out)?;
    let data = job.data.load(job.seed).map_err(config_error)?;
    let encoder = match &job.encoder {
        Some(path) => load_encoder(path)?,
        None => job
            .random_encoder
            .build(data.train.feature_dim(), rng::derive(job.seed, &[rng::label_key("init")]))
            .map_err(config_error)?,
    };
    let solution: NnSolution = nn_threshold_solve(&encoder, &data.train, job.tolerance, job.max_iter).map_err(config_error)?;
    let mut w = csv::Writer::from_path(args.out.join("solve_nn.csv"))?;
    w.write_record(["threshold", "residual", "status", "iterations"])?;
    let status = serde_json::to_value(solution.status)?.as_str().unwrap_or_default().to_string();
    w.write_record([solution.threshold.to_string(), solution.residual.to_string(), status.clone(), solution.iterations.to_string()])?;
    w.flush()?;
    write_report(&args.out, "solve_nn", &job, solution)?;
    emit(&format!("threshold {:.9}  residual {:.3e}  {status}\n", solution.threshold, solution.residual));
    Ok(EXIT_OK)
}
