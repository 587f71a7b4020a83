//! Desk-scale data-parallel training: synthetic correlated gradients for
//! NMSE sweeps, a Gaussian-cluster classification task with a logistic or
//! two-layer model, and the SGD loop that turns a scheme into a
//! time-to-accuracy curve.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::collectives::WorkerGroup;
use crate::error::{Error, Result};
use crate::metrics::{simulated_round_time, TimeModel};
use crate::pipelines::{Aggregator, RoundResult, Scheme};
use crate::vectorcore::{pad_to_pow2, GradientVector, SeedSpec};

/// Mean size of a spike shock relative to the background innovation.
pub const SPIKE_GAIN: f64 = 100.0;

const ENVELOPE_TAG: &str = "synthetic-envelope";
const WORKER_NOISE_TAG: &str = "synthetic-noise";
const CENTERS_TAG: &str = "dataset-centers";
const TRAIN_TAG: &str = "dataset-train";
const VAL_TAG: &str = "dataset-val";
const INIT_TAG: &str = "model-init";
const BATCH_TAG: &str = "batch";

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generator of spatially correlated gradient vectors.
///
/// Coordinate `i` of worker `w` is `m_i * (s_i + divergence * xi_wi)` where
/// `s_i` is a shared random sign and `xi` is worker noise. The magnitude
/// envelope is an AR(1) process `m_i = rho m_{i-1} + (1 - rho) u_i` driven by
/// innovations `u_i = 1 + spike_i * SPIKE_GAIN * exp(noise_sigma * z_i)`, where
/// a `spike_density` fraction of coordinates carries a log-normal shock.
/// With `rho` near 1 each shock leaves a bump of about `1 / (1 - rho)`
/// coordinates. The envelope is rescaled so its RMS is `scale`; keep that
/// small so FP16 chunk norms stay finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGradSpec {
    pub d: usize,
    pub rho: f64,
    pub spike_density: f64,
    /// Log-scale spread of the magnitude envelope.
    pub noise_sigma: f64,
    pub divergence: f64,
    pub scale: f64,
}

impl Default for SyntheticGradSpec {
    fn default() -> Self {
        Self {
            d: 1 << 16,
            rho: 0.99,
            spike_density: 0.01,
            noise_sigma: 2.0,
            divergence: 0.1,
            scale: 0.01,
        }
    }
}

impl SyntheticGradSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::out_of_range("d", 0.0, ">= 1"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::out_of_range("rho", self.rho, "[0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.spike_density) {
            return Err(Error::out_of_range("spike_density", self.spike_density, "[0, 1]"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0 && self.noise_sigma <= 10.0) {
            return Err(Error::out_of_range("noise_sigma", self.noise_sigma, "[0, 10]"));
        }
        if !(self.divergence.is_finite() && self.divergence >= 0.0) {
            return Err(Error::out_of_range("divergence", self.divergence, ">= 0"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::out_of_range("scale", self.scale, "> 0"));
        }
        Ok(())
    }
}

/// Gradient of `worker` at `round`. The envelope, signs and spikes come from
/// the shared stream of the round, so workers only differ by their noise.
pub fn gen_correlated_gradient(
    spec: &SyntheticGradSpec,
    seeds: &SeedSpec,
    worker: usize,
    round: u64,
) -> Result<GradientVector> {
    spec.validate()?;
    let mut shared = seeds.shared(ENVELOPE_TAG, round);
    let shock_mean = (0.5 * spec.noise_sigma * spec.noise_sigma).exp();
    // start from the stationary mean so the head of the vector is typical
    let mut m = 1.0 + spec.spike_density * SPIKE_GAIN * shock_mean;
    let mut envelope = Vec::with_capacity(spec.d);
    let mut signs = Vec::with_capacity(spec.d);
    for _ in 0..spec.d {
        let z = gauss(&mut shared);
        let spike = shared.random::<f64>() < spec.spike_density;
        let u = if spike {
            1.0 + SPIKE_GAIN * (spec.noise_sigma * z).exp()
        } else {
            1.0
        };
        m = spec.rho * m + (1.0 - spec.rho) * u;
        envelope.push(m);
        signs.push(if shared.random::<bool>() { 1.0f64 } else { -1.0 });
    }
    let rms = (envelope.iter().map(|m| m * m).sum::<f64>() / spec.d as f64).sqrt();
    let gain = spec.scale / rms;
    let values: Vec<(f64, f64)> = envelope.into_iter().map(|m| m * gain).zip(signs).collect();
    let out: Vec<f32> = if spec.divergence == 0.0 {
        values.into_iter().map(|(m, s)| (m * s) as f32).collect()
    } else {
        let mut noise = seeds.worker(WORKER_NOISE_TAG, round, worker);
        values
            .into_iter()
            .map(|(m, s)| (m * (s + spec.divergence * gauss(&mut noise))) as f32)
            .collect()
    };
    pad_to_pow2(&out)
}

/// Dense binary-classification data, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: usize,
    x: Vec<f32>,
    y: Vec<f32>,
}

impl Dataset {
    pub fn new(features: usize, x: Vec<f32>, y: Vec<f32>) -> Result<Self> {
        if features == 0 || y.is_empty() {
            return Err(Error::Empty);
        }
        if x.len() != features * y.len() {
            return Err(Error::LengthMismatch {
                expected: features * y.len(),
                actual: x.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l != 0.0 && l != 1.0) {
            return Err(Error::out_of_range("label", bad, "0 or 1"));
        }
        Ok(Self { features, x, y })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn label(&self, i: usize) -> f32 {
        self.y[i]
    }
}

/// Each class is a mixture of `clusters_per_class` Gaussian blobs. Every
/// feature carries noise of standard deviation `noise`; two centers are
/// about `separation * sqrt(2)` apart, so the class signal is spread thinly
/// over all features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSpec {
    pub features: usize,
    pub clusters_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            features: 8192,
            clusters_per_class: 1,
            separation: 3.0,
            noise: 1.0,
            train_size: 2048,
            val_size: 1024,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("features", self.features),
            ("clusters_per_class", self.clusters_per_class),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
        ] {
            if v == 0 {
                return Err(Error::out_of_range(name, 0.0, ">= 1"));
            }
        }
        for (name, v) in [("separation", self.separation), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::out_of_range(name, v, ">= 0"));
            }
        }
        Ok(())
    }
}

/// Train and validation splits drawn from the same cluster centers.
pub fn gaussian_clusters(spec: &ClusterSpec, seeds: &SeedSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let f = spec.features;
    let per_coord = 1.0 / (f as f64).sqrt();
    let mut rng = seeds.shared(CENTERS_TAG, 0);
    let centers: Vec<Vec<f64>> = (0..2 * spec.clusters_per_class)
        .map(|_| (0..f).map(|_| gauss(&mut rng) * spec.separation * per_coord).collect())
        .collect();
    let sample = |tag: &str, size: usize| {
        let mut rng = seeds.shared(tag, 0);
        let mut x = Vec::with_capacity(size * f);
        let mut y = Vec::with_capacity(size);
        for _ in 0..size {
            let label = rng.random_range(0..2usize);
            let c = &centers[label * spec.clusters_per_class + rng.random_range(0..spec.clusters_per_class)];
            x.extend(c.iter().map(|&m| (m + gauss(&mut rng) * spec.noise) as f32));
            y.push(label as f32);
        }
        Dataset::new(f, x, y)
    };
    Ok((sample(TRAIN_TAG, spec.train_size)?, sample(VAL_TAG, spec.val_size)?))
}

/// Reads a CSV with a header. Every column except `label_column` is a
/// feature; labels must be 0 or 1. The last `val_fraction` of the rows
/// become the validation split.
pub fn load_csv(path: &Path, label_column: &str, val_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::out_of_range("val_fraction", val_fraction, "[0, 1)"));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("label column `{label_column}` not in {}", path.display())))?;
    let features = header.len() - 1;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::Config(format!("{}: row {}: `{field}` is not a number", path.display(), line + 2))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    index: line,
                    value: v,
                });
            }
            if j == label_idx {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let rows = y.len();
    let n_val = (rows as f64 * val_fraction).round() as usize;
    let n_train = rows - n_val;
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config(format!(
            "{}: {rows} rows cannot be split with val_fraction {val_fraction}",
            path.display()
        )));
    }
    let val = Dataset::new(features, x.split_off(n_train * features), y.split_off(n_train))?;
    Ok((Dataset::new(features, x, y)?, val))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    #[default]
    Logistic,
    Mlp { hidden: usize },
}


/// Loss and accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    pub loss: f64,
    pub accuracy: f64,
}

/// Binary classifier with a flat parameter vector.
///
/// Logistic layout: `[w (features), b]`. MLP layout:
/// `[W1 (hidden x features, row-major), b1 (hidden), w2 (hidden), b2]`
/// with a ReLU hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Model {
    spec: ModelSpec,
    features: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) - y z`, stable for large `|z|`.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

impl Model {
    pub fn new(spec: ModelSpec, features: usize) -> Result<Self> {
        if features == 0 {
            return Err(Error::out_of_range("features", 0.0, ">= 1"));
        }
        if let ModelSpec::Mlp { hidden: 0 } = spec {
            return Err(Error::out_of_range("hidden", 0.0, ">= 1"));
        }
        Ok(Self { spec, features })
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    /// Tensor sizes in parameter order.
    pub fn layout(&self) -> Vec<usize> {
        match self.spec {
            ModelSpec::Logistic => vec![self.features, 1],
            ModelSpec::Mlp { hidden } => vec![hidden * self.features, hidden, hidden, 1],
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().sum()
    }

    /// Zeros for the logistic model; He-scaled first layer for the MLP.
    pub fn init(&self, seeds: &SeedSpec) -> Vec<f32> {
        let mut p = vec![0f32; self.num_params()];
        if let ModelSpec::Mlp { hidden } = self.spec {
            let mut rng = seeds.shared(INIT_TAG, 0);
            let f = self.features;
            let s1 = (2.0 / f as f64).sqrt();
            for w in &mut p[..hidden * f] {
                *w = (gauss(&mut rng) * s1) as f32;
            }
            let s2 = (1.0 / hidden as f64).sqrt();
            let w2 = hidden * f + hidden;
            for w in &mut p[w2..w2 + hidden] {
                *w = (gauss(&mut rng) * s2) as f32;
            }
        }
        p
    }

    fn check(&self, params: &[f32], data: &Dataset) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        if data.features() != self.features {
            return Err(Error::LengthMismatch {
                expected: self.features,
                actual: data.features(),
            });
        }
        Ok(())
    }

    /// Logit of one row; fills `hidden` with the post-ReLU activations.
    fn forward(&self, params: &[f32], x: &[f32], hidden_buf: &mut Vec<f64>) -> f64 {
        let f = self.features;
        match self.spec {
            ModelSpec::Logistic => {
                let dot: f64 = params[..f].iter().zip(x).map(|(&w, &v)| f64::from(w) * f64::from(v)).sum();
                dot + f64::from(params[f])
            }
            ModelSpec::Mlp { hidden } => {
                let (w1, rest) = params.split_at(hidden * f);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                hidden_buf.clear();
                let mut z = f64::from(b2[0]);
                for j in 0..hidden {
                    let row = &w1[j * f..(j + 1) * f];
                    let a: f64 = row.iter().zip(x).map(|(&w, &v)| f64::from(w) * f64::from(v)).sum::<f64>()
                        + f64::from(b1[j]);
                    let h = a.max(0.0);
                    hidden_buf.push(h);
                    z += f64::from(w2[j]) * h;
                }
                z
            }
        }
    }

    /// Mean loss and mean gradient over `rows` of `data`, accumulated in f64.
    pub fn loss_and_grad(&self, params: &[f32], data: &Dataset, rows: &[usize]) -> Result<(f64, Vec<f32>)> {
        self.check(params, data)?;
        if rows.is_empty() {
            return Err(Error::Empty);
        }
        let f = self.features;
        let mut grad = vec![0f64; params.len()];
        let mut loss = 0f64;
        let mut h = Vec::new();
        for &i in rows {
            let x = data.row(i);
            let y = f64::from(data.label(i));
            let z = self.forward(params, x, &mut h);
            loss += bce_with_logit(z, y);
            let dz = sigmoid(z) - y;
            match self.spec {
                ModelSpec::Logistic => {
                    for (g, &v) in grad[..f].iter_mut().zip(x) {
                        *g += dz * f64::from(v);
                    }
                    grad[f] += dz;
                }
                ModelSpec::Mlp { hidden } => {
                    let w2 = &params[hidden * f + hidden..hidden * f + 2 * hidden];
                    let (gw1, rest) = grad.split_at_mut(hidden * f);
                    let (gb1, rest) = rest.split_at_mut(hidden);
                    let (gw2, gb2) = rest.split_at_mut(hidden);
                    gb2[0] += dz;
                    for j in 0..hidden {
                        gw2[j] += dz * h[j];
                        if h[j] > 0.0 {
                            let dh = dz * f64::from(w2[j]);
                            gb1[j] += dh;
                            for (g, &v) in gw1[j * f..(j + 1) * f].iter_mut().zip(x) {
                                *g += dh * f64::from(v);
                            }
                        }
                    }
                }
            }
        }
        let scale = 1.0 / rows.len() as f64;
        Ok((loss * scale, grad.into_iter().map(|g| (g * scale) as f32).collect()))
    }

    pub fn evaluate(&self, params: &[f32], data: &Dataset) -> Result<Eval> {
        self.check(params, data)?;
        let mut h = Vec::new();
        let (mut loss, mut correct) = (0f64, 0usize);
        for i in 0..data.len() {
            let z = self.forward(params, data.row(i), &mut h);
            let y = f64::from(data.label(i));
            loss += bce_with_logit(z, y);
            if (z > 0.0) == (y == 1.0) {
                correct += 1;
            }
        }
        let n = data.len() as f64;
        Ok(Eval {
            loss: loss / n,
            accuracy: correct as f64 / n,
        })
    }
}

/// A model plus its data.
#[derive(Debug, Clone)]
pub struct Task {
    pub model: Model,
    pub train: Dataset,
    pub val: Dataset,
}

/// Stop after `patience` evaluations without a validation-loss improvement
/// larger than `min_delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopRule {
    pub patience: u64,
    #[serde(default)]
    pub min_delta: f64,
}

impl EarlyStopRule {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::out_of_range("patience", 0.0, ">= 1"));
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return Err(Error::out_of_range("min_delta", self.min_delta, ">= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct StopState {
    best: f64,
    stale: u64,
}

impl StopState {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// True once the rule says stop.
    fn observe(&mut self, rule: &EarlyStopRule, val_loss: f64) -> bool {
        if val_loss < self.best - rule.min_delta {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= rule.patience
    }
}

/// Loop settings shared by every scheme of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: u64,
    pub batch_per_worker: usize,
    pub lr: f64,
    pub momentum: f64,
    pub eval_every: u64,
    /// Trailing window, in evaluations.
    pub smoothing_window: usize,
    pub early_stop: Option<EarlyStopRule>,
    /// Validation-accuracy targets for time-to-accuracy.
    pub thresholds: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 150,
            batch_per_worker: 16,
            lr: 1e-4,
            momentum: 0.0,
            eval_every: 1,
            smoothing_window: 5,
            early_stop: None,
            thresholds: vec![0.8, 0.85],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::out_of_range("rounds", 0.0, ">= 1"));
        }
        if self.batch_per_worker == 0 {
            return Err(Error::out_of_range("batch_per_worker", 0.0, ">= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::out_of_range("lr", self.lr, "> 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::out_of_range("momentum", self.momentum, "[0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(Error::out_of_range("eval_every", 0.0, ">= 1"));
        }
        if self.smoothing_window == 0 {
            return Err(Error::out_of_range("smoothing_window", 0.0, ">= 1"));
        }
        if let Some(rule) = &self.early_stop {
            rule.validate()?;
        }
        Ok(())
    }
}

/// Mean over the trailing `window` entries, truncated at the start.
pub fn rolling_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::out_of_range("window", 0.0, ">= 1"));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0f64;
    for i in 0..series.len() {
        sum += series[i];
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    Ok(out)
}

/// (simulated seconds, smoothed metric) with strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct TtaCurve {
    points: Vec<(f64, f64)>,
}

impl TtaCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::SpecMismatch(format!(
                    "curve times must increase, got {} after {}",
                    w[1].0, w[0].0
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// First time the metric reaches `threshold`.
    pub fn time_to(&self, threshold: f64) -> Option<f64> {
        self.points.iter().find(|p| p.1 >= threshold).map(|p| p.0)
    }
}

/// One evaluation of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: u64,
    pub sim_seconds: f64,
    pub raw_metric: f64,
    pub smoothed_metric: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub scheme: String,
    pub points: Vec<CurvePoint>,
    pub rounds_run: u64,
    /// A non-finite loss or parameter ended the run early.
    pub diverged: bool,
    pub stopped_early: bool,
    pub final_metric: Option<f64>,
    pub mean_round_seconds: f64,
    pub mean_bits_per_coord: f64,
    pub params: Vec<f32>,
}

impl TrainRun {
    pub fn curve(&self) -> Result<TtaCurve> {
        TtaCurve::new(self.points.iter().map(|p| (p.sim_seconds, p.smoothed_metric)).collect())
    }

    pub fn time_to(&self, threshold: f64) -> Result<Option<f64>> {
        Ok(self.curve()?.time_to(threshold))
    }
}

/// What one [`Trainer::step`] did.
#[derive(Debug, Clone)]
pub enum StepOutcome {
    Ok { loss: f64, result: Box<RoundResult>, seconds: f64 },
    Diverged,
}

/// Data-parallel SGD on a [`Task`] with one aggregation scheme.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    task: &'a Task,
    aggregator: Aggregator,
    workers: usize,
    time: TimeModel,
    cfg: TrainConfig,
    seeds: SeedSpec,
    params: Vec<f32>,
    velocity: Vec<f32>,
    round: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        task: &'a Task,
        scheme: Scheme,
        workers: usize,
        time: &TimeModel,
        cfg: &TrainConfig,
        seeds: SeedSpec,
    ) -> Result<Self> {
        cfg.validate()?;
        time.validate()?;
        let group = WorkerGroup::new(workers)?;
        let d = task.model.num_params();
        let aggregator = Aggregator::new(scheme, group, seeds, d, task.model.layout())?;
        Ok(Self {
            task,
            aggregator,
            workers,
            time: time.clone(),
            cfg: cfg.clone(),
            seeds,
            params: task.model.init(&seeds),
            velocity: vec![0.0; d],
            round: 0,
        })
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Rows of the global batch for this round; worker `w` takes the `w`-th
    /// contiguous slice of `batch_per_worker` rows.
    fn global_batch(&self) -> Vec<usize> {
        let mut rng = self.seeds.shared(BATCH_TAG, self.round);
        let n = self.task.train.len();
        (0..self.workers * self.cfg.batch_per_worker)
            .map(|_| rng.random_range(0..n))
            .collect()
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let batch = self.global_batch();
        let mut grads = Vec::with_capacity(self.workers);
        let mut loss = 0f64;
        for shard in batch.chunks(self.cfg.batch_per_worker) {
            let (l, g) = self.task.model.loss_and_grad(&self.params, &self.task.train, shard)?;
            if !l.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Ok(StepOutcome::Diverged);
            }
            loss += l;
            grads.push(g);
        }
        let result = self.aggregator.aggregate(&grads, self.round)?;
        let mu = self.cfg.momentum as f32;
        let lr = self.cfg.lr as f32;
        for ((p, v), &g) in self.params.iter_mut().zip(&mut self.velocity).zip(result.estimate.logical()) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Ok(StepOutcome::Diverged);
        }
        let seconds = simulated_round_time(&result.ledger, &self.time, &self.aggregator.scheme().label);
        self.round += 1;
        Ok(StepOutcome::Ok {
            loss: loss / self.workers as f64,
            result: Box::new(result),
            seconds,
        })
    }
}

/// Runs one scheme until `cfg.rounds`, early stop or divergence. Validation
/// accuracy is the metric; the time axis accumulates simulated round times.
pub fn train(
    task: &Task,
    scheme: &Scheme,
    workers: usize,
    time: &TimeModel,
    cfg: &TrainConfig,
    seeds: SeedSpec,
) -> Result<TrainRun> {
    let mut trainer = Trainer::new(task, scheme.clone(), workers, time, cfg, seeds)?;
    let mut points = Vec::new();
    let mut raw = Vec::new();
    let mut stop = StopState::new();
    let (mut clock, mut bits) = (0f64, 0f64);
    let (mut diverged, mut stopped_early) = (false, false);
    while trainer.round() < cfg.rounds {
        let (seconds, result) = match trainer.step()? {
            StepOutcome::Ok { result, seconds, .. } => (seconds, result),
            StepOutcome::Diverged => {
                diverged = true;
                break;
            }
        };
        if seconds <= 0.0 {
            return Err(Error::Config(
                "time model gives a zero round time; set compute_s_per_round > 0".into(),
            ));
        }
        clock += seconds;
        bits += result.input_bits_per_coord();
        let round = trainer.round();
        if round % cfg.eval_every != 0 && round != cfg.rounds {
            continue;
        }
        let eval = task.model.evaluate(trainer.params(), &task.val)?;
        if !eval.loss.is_finite() {
            diverged = true;
            break;
        }
        raw.push(eval.accuracy);
        let lo = raw.len().saturating_sub(cfg.smoothing_window);
        let smoothed = raw[lo..].iter().sum::<f64>() / (raw.len() - lo) as f64;
        points.push(CurvePoint {
            round,
            sim_seconds: clock,
            raw_metric: eval.accuracy,
            smoothed_metric: smoothed,
            val_loss: eval.loss,
        });
        if let Some(rule) = &cfg.early_stop {
            if stop.observe(rule, eval.loss) {
                stopped_early = true;
                break;
            }
        }
    }
    let rounds_run = trainer.round();
    let denom = rounds_run.max(1) as f64;
    Ok(TrainRun {
        scheme: scheme.label.clone(),
        final_metric: (!diverged).then(|| points.last().map(|p| p.smoothed_metric)).flatten(),
        points,
        rounds_run,
        diverged,
        stopped_early,
        mean_round_seconds: clock / denom,
        mean_bits_per_coord: bits / denom,
        params: trainer.params,
    })
}

#[derive(Serialize)]
struct CurveRow<'a> {
    scheme: &'a str,
    round: u64,
    sim_seconds: f64,
    raw_metric: f64,
    smoothed_metric: f64,
}

/// Writes `scheme,round,sim_seconds,raw_metric,smoothed_metric`.
pub fn write_curves<W: Write>(out: W, runs: &[TrainRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for run in runs {
        for p in &run.points {
            w.serialize(CurveRow {
                scheme: &run.scheme,
                round: p.round,
                sim_seconds: p.sim_seconds,
                raw_metric: p.raw_metric,
                smoothed_metric: p.smoothed_metric,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
