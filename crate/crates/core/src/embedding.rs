//! Parametric representation functions with analytic parameter gradients.
//!
//! Parameter layouts (row-major throughout):
//!
//! * embedding table, `dims = [rows, d]`: one `d`-vector per row.
//! * linear, `dims = [p, d]`: `W (d x p)` followed by `b (d)`.
//! * two-layer, `dims = [p, h, d]`: `W1 (h x p)`, `b1 (h)`, `W2 (d x h)`,
//!   `b2 (d)` with a `tanh` hidden activation.
//!
//! When `normalize` is set the output is projected onto the unit sphere.
//! Temperature is never applied here; see [`similarity`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::FinitePopulation;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    EmbeddingTable,
    Linear,
    TwoLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepresentationConfig {
    pub dim: usize,
    pub temperature: f64,
    pub normalize: bool,
}

impl RepresentationConfig {
    pub fn new(dim: usize, temperature: f64, normalize: bool) -> Result<Self> {
        let cfg = Self { dim, temperature, normalize };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Scaled exponent `a . b / tau` used inside every loss.
pub fn similarity(a: &[f64], b: &[f64], temperature: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    Ok(dot(a, b) / temperature)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intermediate values kept by [`Encoder::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    row: usize,
    hidden: Vec<f64>,
    raw_norm: f64,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    dims: Vec<usize>,
    parameters: Vec<f64>,
    config: RepresentationConfig,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    kind: EncoderKind,
    dims: Vec<usize>,
    temperature: f64,
    normalize: bool,
    parameters: Vec<f64>,
}

fn parameter_count(kind: EncoderKind, dims: &[usize]) -> Result<usize> {
    match (kind, dims) {
        (EncoderKind::EmbeddingTable, &[rows, d]) => Ok(rows * d),
        (EncoderKind::Linear, &[p, d]) => Ok(d * p + d),
        (EncoderKind::TwoLayer, &[p, h, d]) => Ok(h * p + h + d * h + d),
        _ => Err(Error::invalid(format!("dims {dims:?} do not fit a {kind:?} encoder"))),
    }
}

impl Encoder {
    /// Wraps an explicit parameter vector after checking the layout.
    pub fn from_parameters(
        kind: EncoderKind,
        dims: Vec<usize>,
        config: RepresentationConfig,
        parameters: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = parameter_count(kind, &dims)?;
        if parameters.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: parameters.len() });
        }
        if dims.last() != Some(&config.dim) {
            return Err(Error::invalid(format!("output dim {:?} differs from config dim {}", dims.last(), config.dim)));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("encoder dims must be positive"));
        }
        Ok(Self { kind, dims, parameters, config })
    }

    /// Seeded initialisation: entries uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    /// Table rows use fan-in 1.
    pub fn random(kind: EncoderKind, dims: Vec<usize>, config: RepresentationConfig, seed: u64) -> Result<Self> {
        let n = parameter_count(kind, &dims)?;
        let mut scales = Vec::with_capacity(n);
        match (kind, dims.as_slice()) {
            (EncoderKind::EmbeddingTable, _) => scales.resize(n, 1.0),
            (EncoderKind::Linear, &[p, d]) => scales.resize(d * p + d, 1.0 / (p as f64).sqrt()),
            (EncoderKind::TwoLayer, &[p, h, d]) => {
                scales.resize(h * p + h, 1.0 / (p as f64).sqrt());
                scales.resize(h * p + h + d * h + d, 1.0 / (h as f64).sqrt());
            }
            _ => unreachable!("checked by parameter_count"),
        }
        let mut r = rng::stream(seed, &[rng::label_key("encoder-init")]);
        let parameters = scales.iter().map(|s| s * r.random_range(-1.0..1.0)).collect();
        Self::from_parameters(kind, dims, config, parameters)
    }

    pub fn embedding_table(rows: usize, config: RepresentationConfig, seed: u64) -> Result<Self> {
        Self::random(EncoderKind::EmbeddingTable, vec![rows, config.dim], config, seed)
    }

    pub fn linear(input_dim: usize, config: RepresentationConfig, seed: u64) -> Result<Self> {
        Self::random(EncoderKind::Linear, vec![input_dim, config.dim], config, seed)
    }

    pub fn two_layer(input_dim: usize, hidden: usize, config: RepresentationConfig, seed: u64) -> Result<Self> {
        Self::random(EncoderKind::TwoLayer, vec![input_dim, hidden, config.dim], config, seed)
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn config(&self) -> &RepresentationConfig {
        &self.config
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.parameters
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters.len()
    }

    /// Length of the input vector: the feature dimension, or 1 for a table
    /// (whose single input entry is the row index).
    pub fn input_dim(&self) -> usize {
        match self.kind {
            EncoderKind::EmbeddingTable => 1,
            _ => self.dims[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.dim
    }

    fn table_row(&self, input: &[f64]) -> Result<usize> {
        let rows = self.dims[0];
        let v = input[0];
        if v < 0.0 || v.fract() != 0.0 || v as usize >= rows {
            return Err(Error::invalid(format!("table index {v} outside [0, {rows})")));
        }
        Ok(v as usize)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: input.len() });
        }
        let d = self.config.dim;
        let th = &self.parameters;
        let mut row = 0;
        let mut hidden = Vec::new();
        let raw: Vec<f64> = match self.kind {
            EncoderKind::EmbeddingTable => {
                row = self.table_row(input)?;
                th[row * d..(row + 1) * d].to_vec()
            }
            EncoderKind::Linear => {
                let p = self.dims[0];
                let (w, b) = th.split_at(d * p);
                (0..d).map(|i| dot(&w[i * p..(i + 1) * p], input) + b[i]).collect()
            }
            EncoderKind::TwoLayer => {
                let (p, h) = (self.dims[0], self.dims[1]);
                let (w1, rest) = th.split_at(h * p);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(d * h);
                hidden = (0..h).map(|j| (dot(&w1[j * p..(j + 1) * p], input) + b1[j]).tanh()).collect();
                (0..d).map(|i| dot(&w2[i * h..(i + 1) * h], &hidden) + b2[i]).collect()
            }
        };
        let raw_norm = dot(&raw, &raw).sqrt();
        let output = if self.config.normalize { raw.iter().map(|v| v / raw_norm).collect() } else { raw };
        Ok(Trace { input: input.to_vec(), row, hidden, raw_norm, output })
    }

    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.output)
    }

    /// Adds `d(upstream . f(x)) / d(theta)` into `grad`.
    pub fn accumulate_backward(&self, trace: &Trace, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let d = self.config.dim;
        if upstream.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: upstream.len() });
        }
        if grad.len() != self.parameters.len() {
            return Err(Error::DimensionMismatch { expected: self.parameters.len(), found: grad.len() });
        }
        // back through the projection: (I - y y^T) g / |u|
        let g_raw: Vec<f64> = if self.config.normalize {
            let y = &trace.output;
            let along = dot(y, upstream);
            upstream.iter().zip(y).map(|(g, yi)| (g - yi * along) / trace.raw_norm).collect()
        } else {
            upstream.to_vec()
        };
        match self.kind {
            EncoderKind::EmbeddingTable => {
                let r = trace.row;
                for (acc, g) in grad[r * d..(r + 1) * d].iter_mut().zip(&g_raw) {
                    *acc += g;
                }
            }
            EncoderKind::Linear => {
                let p = self.dims[0];
                let (gw, gb) = grad.split_at_mut(d * p);
                for i in 0..d {
                    for (acc, x) in gw[i * p..(i + 1) * p].iter_mut().zip(&trace.input) {
                        *acc += g_raw[i] * x;
                    }
                    gb[i] += g_raw[i];
                }
            }
            EncoderKind::TwoLayer => {
                let (p, h) = (self.dims[0], self.dims[1]);
                let w2 = &self.parameters[h * p + h..h * p + h + d * h];
                let (gw1, rest) = grad.split_at_mut(h * p);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(d * h);
                let mut g_hidden = vec![0.0; h];
                for i in 0..d {
                    let gi = g_raw[i];
                    for j in 0..h {
                        gw2[i * h + j] += gi * trace.hidden[j];
                        g_hidden[j] += gi * w2[i * h + j];
                    }
                    gb2[i] += gi;
                }
                for j in 0..h {
                    let ga = g_hidden[j] * (1.0 - trace.hidden[j] * trace.hidden[j]);
                    for (acc, x) in gw1[j * p..(j + 1) * p].iter_mut().zip(&trace.input) {
                        *acc += ga * x;
                    }
                    gb1[j] += ga;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `upstream . f(x)` with respect to all parameters.
    pub fn embed_backward(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward(input)?;
        let mut grad = vec![0.0; self.parameters.len()];
        self.accumulate_backward(&trace, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Input vector for sample `idx` of a population.
    pub fn input_for(&self, pop: &FinitePopulation, idx: usize) -> Vec<f64> {
        match self.kind {
            EncoderKind::EmbeddingTable => vec![idx as f64],
            _ => pop.features()[idx].clone(),
        }
    }

    /// Embeds every sample of a population; tables are indexed by sample.
    pub fn embed_population(&self, pop: &FinitePopulation) -> Result<Vec<Vec<f64>>> {
        (0..pop.num_samples()).map(|k| self.embed(&self.input_for(pop, k))).collect()
    }

    pub fn embed_all(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        features.iter().map(|x| self.embed(x)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint {
            kind: self.kind,
            dims: self.dims.clone(),
            temperature: self.config.temperature,
            normalize: self.config.normalize,
            parameters: self.parameters.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let dim = *ck.dims.last().ok_or_else(|| Error::invalid("empty dims"))?;
        let config = RepresentationConfig::new(dim, ck.temperature, ck.normalize)?;
        Self::from_parameters(ck.kind, ck.dims, config, ck.parameters)
    }
}
