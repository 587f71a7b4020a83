//! Experiment runner behind the `gradcomp` binary: a TOML config, three
//! subcommands and the artifacts they write.
//!
//! Every subcommand writes its outputs atomically into the output directory
//! together with `<command>.manifest.json` (config hash, seed, version).
//! All outputs are a pure function of the effective config, so reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collectives::{ring_all_reduce, ReduceOp, TrafficLedger, Wire, WorkerGroup};
use crate::compressors::{matrix_shape, CompressorConfig};
use crate::error::{Error, Result};
use crate::metrics::{mean, TimeModel};
use crate::pipelines::{run_topk_round, run_topkc_round, Aggregator, RoundContext, Scheme};
use crate::trainbench::{
    gaussian_clusters, gen_correlated_gradient, load_csv, train, write_curves, ClusterSpec, Model, ModelSpec,
    SyntheticGradSpec, Task, TrainConfig, TrainRun,
};
use crate::vectorcore::{pad_to_pow2, GradientVector, SeedSpec};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit codes of the binary.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Topk,
    Topkc,
    TopkcPermuted,
    Thc,
    Powersgd,
    DenseFp16,
    DenseFp32,
}

impl SchemeKind {
    fn name(self) -> &'static str {
        match self {
            SchemeKind::Topk => "topk",
            SchemeKind::Topkc => "topkc",
            SchemeKind::TopkcPermuted => "topkc-permuted",
            SchemeKind::Thc => "thc",
            SchemeKind::Powersgd => "powersgd",
            SchemeKind::DenseFp16 => "dense-fp16",
            SchemeKind::DenseFp32 => "dense-fp32",
        }
    }
}

/// One `[[schemes]]` entry. Either list `budgets` (bits per coordinate,
/// one run per budget) or give the scheme's parameters directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeEntry {
    pub kind: SchemeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub budgets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<u32>,
    /// Width of the saturating sum; defaults to `q`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulator_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_feedback: Option<bool>,
}

impl SchemeEntry {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            label: None,
            budgets: Vec::new(),
            k: None,
            chunk_size: None,
            chunks: None,
            q: None,
            accumulator_bits: None,
            depth: None,
            rank: None,
            warm_start: None,
            error_feedback: None,
        }
    }

    pub fn with_budgets(mut self, budgets: &[f64]) -> Self {
        self.budgets = budgets.to_vec();
        self
    }
}

/// A scheme entry expanded for a concrete dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedScheme {
    pub scheme: Scheme,
    pub budget: Option<f64>,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Chunk size used for a TopKC budget when none is configured.
pub fn default_chunk_size(budget: f64) -> usize {
    if budget < 1.0 {
        128
    } else {
        64
    }
}

/// `K = round(b d / 48)`.
pub fn topk_for_budget(budget: f64, d: usize) -> Result<usize> {
    let k = (budget * d as f64 / 48.0).round() as usize;
    if k == 0 || k > d {
        return Err(cfg_err(format!("budget {budget} gives K = {k} for d = {d}")));
    }
    Ok(k)
}

/// `J = round((b/16 - 1/C) d / C)`.
pub fn topkc_chunks_for_budget(budget: f64, chunk_size: usize, d: usize) -> Result<usize> {
    let c = chunk_size as f64;
    let j = ((budget / 16.0 - 1.0 / c) * d as f64 / c).round();
    let total = d.div_ceil(chunk_size);
    if j < 1.0 || j as usize > total {
        return Err(cfg_err(format!(
            "budget {budget} gives J = {j} chunks of {chunk_size} for d = {d}"
        )));
    }
    Ok(j as usize)
}

/// Largest rank whose factors fit in `budget` bits per coordinate.
pub fn powersgd_rank_for_budget(budget: f64, d: usize) -> Result<usize> {
    let (m, n) = matrix_shape(d);
    let r = (budget * d as f64 / (32.0 * (m + n) as f64)).floor() as usize;
    if r == 0 {
        return Err(cfg_err(format!("budget {budget} is below rank 1 for d = {d}")));
    }
    Ok(r)
}

fn fmt_budget(b: f64) -> String {
    format!("{b}")
}

impl SchemeEntry {
    fn with_budget(&self, what: &str, set: bool) -> Result<()> {
        if set && !self.budgets.is_empty() {
            return Err(cfg_err(format!(
                "scheme {}: `{what}` and `budgets` are mutually exclusive",
                self.kind.name()
            )));
        }
        Ok(())
    }

    fn need<T: Copy>(&self, v: Option<T>, what: &str) -> Result<T> {
        v.ok_or_else(|| cfg_err(format!("scheme {}: missing `{what}` (or give `budgets`)", self.kind.name())))
    }

    fn config_for(&self, budget: Option<f64>, d: usize) -> Result<(CompressorConfig, String)> {
        let base = self.kind.name().to_string();
        let tag = |s: String| match budget {
            Some(b) => format!("{base}-b{}", fmt_budget(b)),
            None => format!("{base}{s}"),
        };
        Ok(match self.kind {
            SchemeKind::Topk => {
                self.with_budget("k", self.k.is_some())?;
                let k = match budget {
                    Some(b) => topk_for_budget(b, d)?,
                    None => self.need(self.k, "k")?,
                };
                (CompressorConfig::TopK { k }, tag(format!("-k{k}")))
            }
            SchemeKind::Topkc | SchemeKind::TopkcPermuted => {
                self.with_budget("chunks", self.chunks.is_some())?;
                let (chunk_size, chunks) = match budget {
                    Some(b) => {
                        let c = self.chunk_size.unwrap_or_else(|| default_chunk_size(b));
                        (c, topkc_chunks_for_budget(b, c, d)?)
                    }
                    None => (self.need(self.chunk_size, "chunk_size")?, self.need(self.chunks, "chunks")?),
                };
                (
                    CompressorConfig::TopKC { chunk_size, chunks },
                    tag(format!("-c{chunk_size}-j{chunks}")),
                )
            }
            SchemeKind::Thc => {
                self.with_budget("q", self.q.is_some())?;
                let q = match budget {
                    Some(b) if b.fract() == 0.0 => b as u32,
                    Some(b) => return Err(cfg_err(format!("thc budget {b} must be a whole number of bits"))),
                    None => self.need(self.q, "q")?,
                };
                let b = self.accumulator_bits.unwrap_or(q);
                (
                    CompressorConfig::Thc {
                        q,
                        b,
                        depth: self.depth,
                    },
                    format!("{base}-q{q}-acc{b}"),
                )
            }
            SchemeKind::Powersgd => {
                self.with_budget("rank", self.rank.is_some())?;
                let rank = match budget {
                    Some(b) => powersgd_rank_for_budget(b, d)?,
                    None => self.need(self.rank, "rank")?,
                };
                (
                    CompressorConfig::PowerSgd {
                        rank,
                        warm_start: self.warm_start.unwrap_or(true),
                    },
                    tag(format!("-r{rank}")),
                )
            }
            SchemeKind::DenseFp16 | SchemeKind::DenseFp32 => {
                if !self.budgets.is_empty() {
                    return Err(cfg_err(format!("scheme {base} takes no budgets")));
                }
                let c = if self.kind == SchemeKind::DenseFp16 {
                    CompressorConfig::DenseFp16
                } else {
                    CompressorConfig::DenseFp32
                };
                (c, base)
            }
        })
    }

    /// Expands budgets and validates against dimension `d`.
    /// `default_ef` applies when the entry does not set `error_feedback`.
    pub fn resolve(&self, d: usize, default_ef: Option<bool>) -> Result<Vec<ResolvedScheme>> {
        let budgets: Vec<Option<f64>> = if self.budgets.is_empty() {
            vec![None]
        } else {
            self.budgets.iter().map(|&b| Some(b)).collect()
        };
        let mut out = Vec::new();
        for budget in budgets {
            if let Some(b) = budget {
                if !(b.is_finite() && b > 0.0) {
                    return Err(cfg_err(format!("budget {b} must be positive")));
                }
            }
            let (config, auto_label) = self.config_for(budget, d)?;
            config.validate(d).map_err(|e| cfg_err(format!("scheme {auto_label}: {e}")))?;
            let label = match (&self.label, budget) {
                (Some(l), Some(b)) if self.budgets.len() > 1 => format!("{l}-b{}", fmt_budget(b)),
                (Some(l), _) => l.clone(),
                (None, _) => auto_label,
            };
            let mut scheme = Scheme::new(label, config);
            if self.kind == SchemeKind::TopkcPermuted {
                scheme = scheme.permuted();
            }
            if let Some(ef) = self.error_feedback.or(default_ef) {
                let allowed = scheme.error_feedback;
                scheme = scheme.with_error_feedback(ef && allowed);
            }
            out.push(ResolvedScheme { scheme, budget });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Seeds `seed, seed + 1, ...`; gradients are paired across schemes.
    pub seeds: u64,
    pub rounds: u64,
    /// Residuals carry over between the (independent) synthetic rounds only
    /// when enabled.
    pub error_feedback: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            rounds: 20,
            error_feedback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Clusters(ClusterSpec),
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

fn default_label_column() -> String {
    "label".into()
}

fn default_val_fraction() -> f64 {
    0.2
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Clusters(ClusterSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSetting {
    pub d: usize,
    pub chunk_size: usize,
    pub chunks: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub settings: Vec<CheckSetting>,
    /// Seeded instances per oracle check.
    pub oracle_instances: u64,
    /// Overrides the value width the bit formulas expect (fault injection).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault_value_bits: Option<u32>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        let s = |d, chunk_size, chunks, k| CheckSetting {
            d,
            chunk_size,
            chunks,
            k,
        };
        Self {
            settings: vec![
                s(1 << 20, 64, 7936, 174_763),
                s(1 << 16, 128, 12, 683),
                s(1 << 16, 64, 240, 10_923),
                s(8192, 256, 3, 1000),
                s(4096, 64, 8, 100),
                s(1024, 16, 4, 10),
            ],
            oracle_instances: 100,
            fault_value_bits: None,
        }
    }
}

/// Everything a run needs. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub time_model: TimeModel,
    /// Synthetic gradients for `nmse-sweep`.
    pub gradients: SyntheticGradSpec,
    pub model: ModelSpec,
    pub data: DataSource,
    pub train: TrainConfig,
    pub nmse_sweep: SweepConfig,
    pub collective_check: CheckConfig,
    pub schemes: Vec<SchemeEntry>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let b = [0.5, 2.0, 8.0];
        let mut thc_sat = SchemeEntry::new(SchemeKind::Thc);
        thc_sat.q = Some(4);
        let mut thc_wide = thc_sat.clone();
        thc_wide.accumulator_bits = Some(8);
        let mut psgd = SchemeEntry::new(SchemeKind::Powersgd);
        psgd.rank = Some(4);
        Self {
            seed: 1,
            workers: 4,
            out: PathBuf::from("out"),
            time_model: TimeModel {
                bandwidth_bits_per_s: 1e9,
                compute_s_per_round: 1e-4,
                compression_compute_s: BTreeMap::new(),
            },
            gradients: SyntheticGradSpec::default(),
            model: ModelSpec::default(),
            data: DataSource::default(),
            train: TrainConfig::default(),
            nmse_sweep: SweepConfig::default(),
            collective_check: CheckConfig::default(),
            schemes: vec![
                SchemeEntry::new(SchemeKind::Topk).with_budgets(&b),
                SchemeEntry::new(SchemeKind::Topkc).with_budgets(&b),
                SchemeEntry::new(SchemeKind::TopkcPermuted).with_budgets(&b),
                thc_sat,
                thc_wide,
                psgd,
                SchemeEntry::new(SchemeKind::DenseFp16),
                SchemeEntry::new(SchemeKind::DenseFp32),
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => cfg_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering, ignoring the output
    /// directory.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Checks everything that does not depend on the dataset contents.
    pub fn validate(&self) -> Result<()> {
        let wrap = |what: &str, e: Error| cfg_err(format!("{what}: {e}"));
        WorkerGroup::new(self.workers).map_err(|e| wrap("workers", e))?;
        self.time_model.validate()?;
        self.gradients.validate().map_err(|e| wrap("gradients", e))?;
        self.train.validate().map_err(|e| wrap("train", e))?;
        if let DataSource::Clusters(spec) = &self.data {
            spec.validate().map_err(|e| wrap("data", e))?;
        }
        if let ModelSpec::Mlp { hidden: 0 } = self.model {
            return Err(cfg_err("model.hidden must be >= 1"));
        }
        if self.nmse_sweep.seeds == 0 || self.nmse_sweep.rounds == 0 {
            return Err(cfg_err("nmse_sweep.seeds and nmse_sweep.rounds must be >= 1"));
        }
        for s in &self.collective_check.settings {
            if s.chunk_size == 0 || s.d % s.chunk_size != 0 {
                return Err(cfg_err(format!(
                    "collective_check: chunk_size {} must divide d = {}",
                    s.chunk_size, s.d
                )));
            }
            CompressorConfig::TopKC {
                chunk_size: s.chunk_size,
                chunks: s.chunks,
            }
            .validate(s.d)
            .map_err(|e| wrap("collective_check", e))?;
            CompressorConfig::TopK { k: s.k }
                .validate(s.d)
                .map_err(|e| wrap("collective_check", e))?;
        }
        if let Some(b) = self.collective_check.fault_value_bits {
            if b == 0 || b > 64 {
                return Err(cfg_err(format!("collective_check.fault_value_bits = {b} is out of range")));
            }
        }
        if self.schemes.is_empty() {
            return Err(cfg_err("at least one [[schemes]] entry is required"));
        }
        for s in &self.schemes {
            s.resolve(self.gradients.d, None)?;
        }
        Ok(())
    }

    pub fn resolve_schemes(&self, d: usize, default_ef: Option<bool>) -> Result<Vec<ResolvedScheme>> {
        let mut out = Vec::new();
        for s in &self.schemes {
            out.extend(s.resolve(d, default_ef)?);
        }
        let mut labels: Vec<&str> = out.iter().map(|r| r.scheme.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(cfg_err(format!("duplicate scheme label `{}`", w[0])));
        }
        Ok(out)
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    artifact_version: &'a str,
    seed: u64,
    config_sha256: String,
    outputs: &'a [String],
}

/// What a subcommand produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Lines for the terminal.
    pub report: Vec<String>,
    pub failed_checks: Vec<String>,
    pub diverged: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if !self.diverged.is_empty() {
            EXIT_DIVERGED
        } else if !self.failed_checks.is_empty() {
            EXIT_CHECK_FAILED
        } else {
            EXIT_OK
        }
    }
}

fn finish(cfg: &ExperimentConfig, command: &str, outputs: Vec<(String, Vec<u8>)>) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (name, bytes) in &outputs {
        let path = cfg.out.join(name);
        write_atomic(&path, bytes)?;
        files.push(path);
    }
    let names: Vec<String> = outputs.into_iter().map(|(n, _)| n).collect();
    let manifest = Manifest {
        command,
        artifact_version: ARTIFACT_VERSION,
        seed: cfg.seed,
        config_sha256: cfg.hash()?,
        outputs: &names,
    };
    let path = cfg.out.join(format!("{command}.manifest.json"));
    let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| cfg_err(e.to_string()))?;
    text.push(b'\n');
    write_atomic(&path, &text)?;
    files.push(path);
    Ok(files)
}

/// One cell of the NMSE sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scheme: String,
    /// Configured budget, or the measured bits per coordinate.
    pub b: f64,
    pub seed: u64,
    pub mean_nmse: f64,
    pub bits_per_coord: f64,
}

/// Mean NMSE per (scheme, seed) over `nmse_sweep.rounds` rounds of
/// synthetic gradients. Every scheme sees the same gradients.
pub fn nmse_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let d = cfg.gradients.d;
    let schemes = cfg.resolve_schemes(d, Some(cfg.nmse_sweep.error_feedback))?;
    let group = WorkerGroup::new(cfg.workers)?;
    let mut rows = Vec::new();
    for i in 0..cfg.nmse_sweep.seeds {
        let seed = cfg.seed + i;
        let seeds = SeedSpec::new(seed);
        let mut aggs = schemes
            .iter()
            .map(|r| Aggregator::new(r.scheme.clone(), group, seeds, d, Vec::new()))
            .collect::<Result<Vec<_>>>()?;
        let mut nmse = vec![Vec::new(); schemes.len()];
        let mut bits = vec![0f64; schemes.len()];
        for round in 0..cfg.nmse_sweep.rounds {
            let grads = (0..cfg.workers)
                .map(|w| gen_correlated_gradient(&cfg.gradients, &seeds, w, round).map(|g| g.logical().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            for (j, agg) in aggs.iter_mut().enumerate() {
                let r = agg.aggregate(&grads, round)?;
                if let Some(e) = r.nmse {
                    nmse[j].push(e);
                }
                bits[j] += r.input_bits_per_coord();
            }
        }
        for (j, r) in schemes.iter().enumerate() {
            let measured = bits[j] / cfg.nmse_sweep.rounds as f64;
            rows.push(SweepRow {
                scheme: r.scheme.label.clone(),
                b: r.budget.unwrap_or(measured),
                seed,
                mean_nmse: mean(&nmse[j]).unwrap_or(f64::NAN),
                bits_per_coord: measured,
            });
        }
    }
    Ok(rows)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn cmd_nmse_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let rows = nmse_sweep(cfg)?;
    let diverged = rows
        .iter()
        .filter(|r| !r.mean_nmse.is_finite())
        .map(|r| format!("{} seed {}", r.scheme, r.seed))
        .collect();
    let files = finish(cfg, "nmse-sweep", vec![("nmse_sweep.csv".into(), csv_bytes(&rows)?)])?;
    Ok(Outcome {
        files,
        report: Vec::new(),
        failed_checks: Vec::new(),
        diverged,
    })
}

/// Builds the model and its data. Failures here are config errors.
pub fn build_task(cfg: &ExperimentConfig) -> Result<Task> {
    let seeds = SeedSpec::new(cfg.seed);
    let (train, val) = match &cfg.data {
        DataSource::Clusters(spec) => gaussian_clusters(spec, &seeds)?,
        DataSource::Csv {
            path,
            label_column,
            val_fraction,
        } => load_csv(path, label_column, *val_fraction)
            .map_err(|e| cfg_err(format!("dataset {}: {e}", path.display())))?,
    };
    let model = Model::new(cfg.model, train.features())?;
    Ok(Task { model, train, val })
}

/// Per-scheme summary written to `train_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub scheme: String,
    pub budget: Option<f64>,
    pub rounds_run: u64,
    pub diverged: bool,
    pub stopped_early: bool,
    pub final_metric: Option<f64>,
    pub mean_round_seconds: f64,
    pub mean_bits_per_coord: f64,
    /// Threshold (as written) to simulated seconds, `null` if never reached.
    pub time_to: BTreeMap<String, Option<f64>>,
}

/// Trains every configured scheme from the same initialization.
pub fn train_all(cfg: &ExperimentConfig, task: &Task) -> Result<Vec<(TrainRun, TrainSummary)>> {
    let d = task.model.num_params();
    let schemes = cfg.resolve_schemes(d, None)?;
    let seeds = SeedSpec::new(cfg.seed);
    let mut out = Vec::new();
    for r in schemes {
        let run = train(task, &r.scheme, cfg.workers, &cfg.time_model, &cfg.train, seeds)?;
        let curve = run.curve()?;
        let summary = TrainSummary {
            scheme: run.scheme.clone(),
            budget: r.budget,
            rounds_run: run.rounds_run,
            diverged: run.diverged,
            stopped_early: run.stopped_early,
            final_metric: run.final_metric,
            mean_round_seconds: run.mean_round_seconds,
            mean_bits_per_coord: run.mean_bits_per_coord,
            time_to: cfg
                .train
                .thresholds
                .iter()
                .map(|&t| (format!("{t}"), curve.time_to(t)))
                .collect(),
        };
        out.push((run, summary));
    }
    Ok(out)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let task = build_task(cfg)?;
    let results = train_all(cfg, &task)?;
    let (runs, summaries): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut curves = Vec::new();
    write_curves(&mut curves, &runs)?;
    let mut summary = serde_json::to_vec_pretty(&summaries).map_err(|e| cfg_err(e.to_string()))?;
    summary.push(b'\n');
    let files = finish(
        cfg,
        "train",
        vec![("tta_curves.csv".into(), curves), ("train_summary.json".into(), summary)],
    )?;
    Ok(Outcome {
        files,
        report: summaries
            .iter()
            .map(|s| {
                let tta: Vec<String> = s
                    .time_to
                    .iter()
                    .map(|(t, v)| match v {
                        Some(secs) => format!("{t}: {secs:.4}s"),
                        None => format!("{t}: not reached"),
                    })
                    .collect();
                format!("{} final {:.4} | {}", s.scheme, s.final_metric.unwrap_or(f64::NAN), tta.join(", "))
            })
            .collect(),
        failed_checks: Vec::new(),
        diverged: runs.iter().filter(|r| r.diverged).map(|r| r.scheme.clone()).collect(),
    })
}

/// One line of the collective-check report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub expected: String,
    pub measured: String,
    pub pass: bool,
}

fn row(check: String, expected: impl ToString, measured: impl ToString, pass: bool) -> CheckRow {
    CheckRow {
        check,
        expected: expected.to_string(),
        measured: measured.to_string(),
        pass,
    }
}

fn gaussian_grads(n: usize, d: usize, seeds: &SeedSpec, round: u64) -> Result<Vec<GradientVector>> {
    (0..n)
        .map(|w| {
            let mut rng = seeds.worker("check-grads", round, w);
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            pad_to_pow2(&v)
        })
        .collect()
}

/// Ledger-versus-formula and collective-versus-oracle checks.
pub fn collective_check(cfg: &ExperimentConfig) -> Result<Vec<CheckRow>> {
    cfg.validate()?;
    let n = cfg.workers;
    let group = WorkerGroup::new(n)?;
    let check = &cfg.collective_check;
    let vb = u64::from(check.fault_value_bits.unwrap_or(16));
    let mut rows = Vec::new();
    for (i, s) in check.settings.iter().enumerate() {
        let seeds = SeedSpec::new(cfg.seed + i as u64);
        let ctx = RoundContext::new(group, seeds, 0);
        let grads = gaussian_grads(n, s.d, &seeds, 0)?;
        let (d, c, j, k) = (s.d as u64, s.chunk_size as u64, s.chunks as u64, s.k as u64);

        // b = 16 (J C / d + 1 / C), compared as whole bits per worker
        let r = run_topkc_round(&ctx, &grads, s.chunk_size, s.chunks)?;
        let expected = vb * (j * c + d / c);
        let measured = (0..n).map(|w| r.ledger.worker_input(w)).max().unwrap_or(0);
        rows.push(row(
            format!("topkc-bits d={d} C={c} J={j}"),
            expected as f64 / d as f64,
            measured as f64 / d as f64,
            measured == expected,
        ));

        // b = 48 K / d: a 16-bit value plus a 32-bit index per coordinate
        let r = run_topk_round(&ctx, &grads, s.k)?;
        let expected = (vb + 32) * k;
        let measured = (0..n).map(|w| r.ledger.worker_input(w)).max().unwrap_or(0);
        rows.push(row(
            format!("topk-bits d={d} K={k}"),
            expected as f64 / d as f64,
            measured as f64 / d as f64,
            measured == expected,
        ));

        // ring all-reduce egress: 2 (n - 1) blocks of ceil(d / n) elements
        let mut ledger = TrafficLedger::new();
        let inputs: Vec<Vec<f32>> = grads.iter().map(|g| g.logical().to_vec()).collect();
        ring_all_reduce(&group, &inputs, ReduceOp::FloatSum, Wire::FP32, "dense", &mut ledger)?;
        let expected = 2 * (n as u64 - 1) * d.div_ceil(n as u64) * 32;
        let measured = ledger.max_worker_egress();
        rows.push(row(format!("ring-egress d={d} n={n}"), expected, measured, measured == expected));
        if n == 1 {
            rows.push(row(
                format!("zero-traffic d={d}"),
                0,
                ledger.total_sent(),
                ledger.total_sent() == 0,
            ));
        }
    }
    rows.extend(oracle_checks(group, cfg.seed, check.oracle_instances)?);
    Ok(rows)
}

fn oracle_checks(group: WorkerGroup, seed: u64, instances: u64) -> Result<Vec<CheckRow>> {
    let n = group.size();
    let (mut worst_rel, mut minmax_ok, mut sat_ok) = (0f64, true, true);
    for inst in 0..instances {
        let mut rng = SeedSpec::new(seed).shared("check-oracle", inst);
        let len = rng.random_range(1..600usize);
        let floats: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut ledger = TrafficLedger::new();
        let sum = ring_all_reduce(&group, &floats, ReduceOp::FloatSum, Wire::FP32, "sum", &mut ledger)?;
        for i in 0..len {
            let naive: f64 = floats.iter().map(|v| f64::from(v[i])).sum();
            let abs: f64 = floats.iter().map(|v| f64::from(v[i]).abs()).sum();
            for out in &sum.outputs {
                let rel = (f64::from(out[i]) - naive).abs() / abs.max(f64::MIN_POSITIVE);
                worst_rel = worst_rel.max(rel);
            }
        }
        for (op, pick) in [(ReduceOp::ElemMin, f32::min as fn(f32, f32) -> f32), (ReduceOp::ElemMax, f32::max)] {
            let r = ring_all_reduce(&group, &floats, op, Wire::FP32, "range", &mut ledger)?;
            let oracle: Vec<f32> = (0..len)
                .map(|i| floats.iter().map(|v| v[i]).reduce(pick).unwrap())
                .collect();
            minmax_ok &= r.outputs.iter().all(|o| *o == oracle);
        }
        let bits = 8;
        let cap = ((1i32 << (bits - 1)) - 1) / n as i32;
        let ints: Vec<Vec<i32>> = (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(-cap..=cap)).collect())
            .collect();
        let r = ring_all_reduce(&group, &ints, ReduceOp::SatIntSum { bits }, Wire::int(bits), "sat", &mut ledger)?;
        let oracle: Vec<i32> = (0..len).map(|i| ints.iter().map(|v| v[i]).sum()).collect();
        sat_ok &= r.stats.clip_events == 0 && r.outputs.iter().all(|o| *o == oracle);
    }
    Ok(vec![
        row(format!("ring-sum-oracle n={n}"), "<= 1e-6", format!("{worst_rel:.3e}"), worst_rel <= 1e-6),
        row(format!("ring-min-max-oracle n={n}"), "exact", if minmax_ok { "exact" } else { "mismatch" }, minmax_ok),
        row(format!("sat-noclip-oracle n={n}"), "exact", if sat_ok { "exact" } else { "mismatch" }, sat_ok),
    ])
}

pub fn cmd_collective_check(cfg: &ExperimentConfig) -> Result<Outcome> {
    let rows = collective_check(cfg)?;
    let files = finish(cfg, "collective-check", vec![("collective_check.csv".into(), csv_bytes(&rows)?)])?;
    Ok(Outcome {
        files,
        report: rows
            .iter()
            .map(|r| {
                let status = if r.pass { "PASS" } else { "FAIL" };
                format!("{status} {} (expected {}, measured {})", r.check, r.expected, r.measured)
            })
            .collect(),
        failed_checks: rows.iter().filter(|r| !r.pass).map(|r| r.check.clone()).collect(),
        diverged: Vec::new(),
    })
}

#[derive(Debug, Parser)]
#[command(name = "gradcomp", version, about = "Gradient compression experiments on a simulated ring")]
pub struct Cli {
    /// TOML config; defaults are used for anything it omits.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Prints the effective config (with defaults) and exits.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Mean NMSE per scheme, budget and seed on synthetic gradients.
    NmseSweep,
    /// Time-to-accuracy curves on the benchmark task.
    Train,
    /// Bit-accounting and collective oracle checks.
    CollectiveCheck,
}

impl Cli {
    /// Loads the config file (if any) and applies the flag overrides.
    pub fn effective_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Maps a library error to the binary's exit code.
pub fn error_exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_DIVERGED,
        Error::Config(_) | Error::OutOfRange { .. } => EXIT_CONFIG,
        _ => EXIT_CHECK_FAILED,
    }
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match cli.effective_config() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("gradcomp: {e}");
            return EXIT_CONFIG;
        }
    };
    if cli.print_config {
        return match cfg.to_toml() {
            Ok(text) => {
                print!("{text}");
                EXIT_OK
            }
            Err(e) => {
                eprintln!("gradcomp: {e}");
                EXIT_CONFIG
            }
        };
    }
    let Some(command) = cli.command else {
        eprintln!("gradcomp: no subcommand given (nmse-sweep, train or collective-check)");
        return EXIT_CONFIG;
    };
    let result = match command {
        Command::NmseSweep => cmd_nmse_sweep(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::CollectiveCheck => cmd_collective_check(&cfg),
    };
    match result {
        Ok(outcome) => {
            for line in &outcome.report {
                println!("{line}");
            }
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            for s in &outcome.diverged {
                eprintln!("gradcomp: {s} diverged");
            }
            for c in &outcome.failed_checks {
                eprintln!("gradcomp: check failed: {c}");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("gradcomp: {e}");
            error_exit_code(&e)
        }
    }
}
