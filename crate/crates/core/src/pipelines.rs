//! End-to-end aggregation rounds: each scheme's compression steps composed
//! with the ring collectives, producing the mean-gradient estimate, the
//! traffic ledger and diagnostics.
//!
//! Every `run_*_round` function takes gradients that already include any
//! error-feedback residual. [`Aggregator`] owns the residuals and the
//! PowerSGD warm-start state across rounds.
//!
//! Each round computes the estimate independently from every worker's
//! collective output and fails if the copies differ, so a successful round
//! always ends in worker consensus.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::collectives::{all_gather, ring_all_reduce, ReduceOp, TrafficLedger, Wire, WorkerGroup};
use crate::compressors::{
    chunk_ranges, draw_q, fill_stream, has_full_column_rank, matrix_shape, orthogonalize,
    payload_bits, thc_dequantize, thc_quantize, topk_compress, topkc_gather, topkc_local_norms,
    topkc_scatter, topkc_select_chunks, CompressedPayload, CompressorConfig, Precision,
    ResidualBuffer, POWERSGD_MIN_COMPRESS,
};
use crate::error::{Error, Result};
use crate::metrics::{nmse, overflow_rate, simulated_round_time, OverflowStats, TimeModel};
use crate::transforms::{inverse_permute, permute, rht_forward_raw, rht_inverse_raw, Permutation, RotationSpec};
use crate::vectorcore::{fp16_round_trip, from_fp16_bits, pad_to_pow2, ChunkGeometry, GradientVector, SeedSpec};

pub const PHASE_TOPKC_NORMS: &str = "topkc-norms";
pub const PHASE_TOPKC_VALUES: &str = "topkc-values";
pub const PHASE_TOPK_GATHER: &str = "topk-gather";
pub const PHASE_THC_MIN: &str = "thc-range-min";
pub const PHASE_THC_MAX: &str = "thc-range-max";
pub const PHASE_THC_CODES: &str = "thc-codes";
pub const PHASE_POWERSGD_P: &str = "powersgd-p";
pub const PHASE_POWERSGD_Q: &str = "powersgd-q";
pub const PHASE_POWERSGD_DENSE: &str = "powersgd-dense";
pub const PHASE_DENSE: &str = "dense";

/// Shared per-round context.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub group: WorkerGroup,
    pub seeds: SeedSpec,
    pub round: u64,
}

impl RoundContext {
    pub fn new(group: WorkerGroup, seeds: SeedSpec, round: u64) -> Self {
        Self {
            group,
            seeds,
            round,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    /// Aggregated mean gradient.
    pub estimate: GradientVector,
    pub ledger: TrafficLedger,
    pub overflow: OverflowStats,
    /// NMSE against the exact mean of the round's inputs; `None` when that
    /// mean is zero.
    pub nmse: Option<f64>,
    /// Each worker's decompression of its own contribution, used by error
    /// feedback.
    pub local_reconstructions: Vec<Vec<f32>>,
    /// Chunks aggregated by chunked TopK, in the caller's coordinate order.
    pub selected_chunks: Option<Vec<usize>>,
}

impl RoundResult {
    pub fn input_bits_per_coord(&self) -> f64 {
        self.ledger.input_bits_per_coord(self.estimate.logical_len())
    }
}

fn check_inputs(ctx: &RoundContext, grads: &[GradientVector]) -> Result<usize> {
    let n = ctx.group.size();
    if grads.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: grads.len(),
        });
    }
    let d = grads[0].logical_len();
    if let Some(g) = grads.iter().find(|g| g.logical_len() != d) {
        return Err(Error::LengthMismatch {
            expected: d,
            actual: g.logical_len(),
        });
    }
    Ok(d)
}

/// Exact mean of the logical coordinates, accumulated in f64.
pub fn exact_mean(grads: &[GradientVector]) -> Vec<f32> {
    let d = grads[0].logical_len();
    let mut acc = vec![0f64; d];
    for g in grads {
        for (a, &x) in acc.iter_mut().zip(g.logical()) {
            *a += f64::from(x);
        }
    }
    let n = grads.len() as f64;
    acc.into_iter().map(|x| (x / n) as f32).collect()
}

fn nmse_or_none(estimate: &[f32], reference: &[f32]) -> Option<f64> {
    nmse(estimate, reference).ok()
}

/// Picks worker 0's estimate after checking all workers agree bitwise.
fn consensus(mut per_worker: Vec<Vec<f32>>) -> Result<Vec<f32>> {
    let first = per_worker.swap_remove(0);
    for (w, other) in per_worker.iter().enumerate() {
        if other.len() != first.len()
            || other.iter().zip(&first).any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::Degenerate(format!(
                "worker {} disagrees with worker 0 after aggregation",
                w + 1
            )));
        }
    }
    Ok(first)
}

fn finish(
    grads: &[GradientVector],
    estimate: Vec<f32>,
    ledger: TrafficLedger,
    overflow: OverflowStats,
    local_reconstructions: Vec<Vec<f32>>,
    selected_chunks: Option<Vec<usize>>,
) -> Result<RoundResult> {
    let mean = exact_mean(grads);
    let nmse = nmse_or_none(&estimate, &mean);
    Ok(RoundResult {
        estimate: pad_to_pow2(&estimate)?,
        ledger,
        overflow,
        nmse,
        local_reconstructions,
        selected_chunks,
    })
}

/// Chunked TopK: FP16 chunk-norm all-reduce, consensus selection of `chunks`
/// chunks, then an FP16 all-reduce of the selected chunk values.
pub fn run_topkc_round(
    ctx: &RoundContext,
    grads: &[GradientVector],
    chunk_size: usize,
    chunks: usize,
) -> Result<RoundResult> {
    let d = check_inputs(ctx, grads)?;
    CompressorConfig::TopKC { chunk_size, chunks }.validate(d)?;
    let n = ctx.group.size();
    let geom = ChunkGeometry::new(d, chunk_size)?;
    let mut ledger = TrafficLedger::new();

    let norms = grads
        .iter()
        .map(|g| topkc_local_norms(g, &geom))
        .collect::<Result<Vec<_>>>()?;
    let summed = ring_all_reduce(&ctx.group, &norms, ReduceOp::FloatSum, Wire::FP16, PHASE_TOPKC_NORMS, &mut ledger)?;

    // every worker selects from its own copy of the aggregated norms
    let selections = summed
        .outputs
        .iter()
        .map(|s| topkc_select_chunks(s, chunks))
        .collect::<Result<Vec<_>>>()?;
    if selections.iter().any(|s| s != &selections[0]) {
        return Err(Error::Degenerate("workers selected different chunks".into()));
    }
    let ids = selections.into_iter().next().unwrap_or_default();

    let payloads: Vec<Vec<f32>> = grads.iter().map(|g| topkc_gather(g.logical(), &geom, &ids)).collect();
    let reduced = ring_all_reduce(&ctx.group, &payloads, ReduceOp::FloatSum, Wire::FP16, PHASE_TOPKC_VALUES, &mut ledger)?;

    let per_worker = reduced
        .outputs
        .iter()
        .map(|sum| {
            let mean: Vec<f32> = sum.iter().map(|&x| x / n as f32).collect();
            let mut out = vec![0f32; d];
            topkc_scatter(&mean, &geom, &ids, &mut out);
            out
        })
        .collect();
    let local = payloads
        .iter()
        .map(|vals| {
            let mut out = vec![0f32; d];
            topkc_scatter(vals, &geom, &ids, &mut out);
            out
        })
        .collect();
    finish(grads, consensus(per_worker)?, ledger, OverflowStats::default(), local, Some(ids))
}

/// Chunked TopK after a shared random permutation of the coordinates, which
/// removes any spatial locality. The estimate is returned in the original
/// order.
pub fn run_topkc_permuted_round(
    ctx: &RoundContext,
    grads: &[GradientVector],
    chunk_size: usize,
    chunks: usize,
) -> Result<RoundResult> {
    let d = check_inputs(ctx, grads)?;
    let perm = Permutation::draw(d, &ctx.seeds, ctx.round);
    let shuffled = grads
        .iter()
        .map(|g| permute(g, &perm))
        .collect::<Result<Vec<_>>>()?;
    let mut result = run_topkc_round(ctx, &shuffled, chunk_size, chunks)?;
    result.estimate = inverse_permute(&result.estimate, &perm)?;
    result.local_reconstructions = result
        .local_reconstructions
        .iter()
        .map(|r| perm.invert(r))
        .collect();
    result.nmse = nmse_or_none(result.estimate.logical(), &exact_mean(grads));
    result.selected_chunks = None;
    Ok(result)
}

/// Per-worker TopK with FP16 values and 32-bit indices, aggregated with a
/// ring all-gather and a local scatter-add.
pub fn run_topk_round(ctx: &RoundContext, grads: &[GradientVector], k: usize) -> Result<RoundResult> {
    let d = check_inputs(ctx, grads)?;
    CompressorConfig::TopK { k }.validate(d)?;
    let n = ctx.group.size();
    let mut ledger = TrafficLedger::new();
    let payloads = grads
        .iter()
        .map(|g| topk_compress(g.logical(), k))
        .collect::<Result<Vec<_>>>()?;
    let bits: Vec<u64> = payloads.iter().map(payload_bits).collect();
    let views = all_gather(&ctx.group, &payloads, &bits, PHASE_TOPK_GATHER, &mut ledger)?;

    let scatter = |p: &CompressedPayload, out: &mut [f32]| {
        if let CompressedPayload::Sparse { indices, values } = p {
            for (&i, &v) in indices.iter().zip(values) {
                out[i as usize] += from_fp16_bits(v);
            }
        }
    };
    let per_worker = views
        .iter()
        .map(|all| {
            let mut sum = vec![0f32; d];
            for p in all {
                scatter(p, &mut sum);
            }
            sum.into_iter().map(|x| x / n as f32).collect()
        })
        .collect();
    let local = payloads
        .iter()
        .map(|p| {
            let mut out = vec![0f32; d];
            scatter(p, &mut out);
            out
        })
        .collect();
    finish(grads, consensus(per_worker)?, ledger, OverflowStats::default(), local, None)
}

/// Rotated stochastic quantization with saturating aggregation.
///
/// Phase 1 agrees on per-block `(min, max)` of the rotated values with
/// FP32 min/max all-reduces. Phase 2 quantizes every worker's rotated
/// vector on the shared grid and sums the codes with a `b`-bit saturating
/// all-reduce; the sum is mapped back with `n·μ + Δ·z_sum`, un-rotated and
/// divided by `n`.
pub fn run_thc_round(
    ctx: &RoundContext,
    grads: &[GradientVector],
    q: u32,
    b: u32,
    depth: Option<u32>,
) -> Result<RoundResult> {
    let d = check_inputs(ctx, grads)?;
    CompressorConfig::Thc { q, b, depth }.validate(d)?;
    let n = ctx.group.size();
    let padded = grads[0].padded_len();
    let depth = depth.unwrap_or(padded.trailing_zeros());
    let spec = RotationSpec::draw(padded, depth, &ctx.seeds, ctx.round)?;
    let geom = ChunkGeometry::new(padded, spec.block_size())?;
    let mut ledger = TrafficLedger::new();

    let rotated = grads
        .iter()
        .map(|g| rht_forward_raw(g, &spec))
        .collect::<Result<Vec<_>>>()?;
    let local_ranges: Vec<Vec<(f32, f32)>> = rotated.iter().map(|r| chunk_ranges(r, &geom)).collect();
    let mins: Vec<Vec<f32>> = local_ranges.iter().map(|r| r.iter().map(|x| x.0).collect()).collect();
    let maxs: Vec<Vec<f32>> = local_ranges.iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
    let lo = ring_all_reduce(&ctx.group, &mins, ReduceOp::ElemMin, Wire::FP32, PHASE_THC_MIN, &mut ledger)?;
    let hi = ring_all_reduce(&ctx.group, &maxs, ReduceOp::ElemMax, Wire::FP32, PHASE_THC_MAX, &mut ledger)?;
    let shared: Vec<Vec<(f32, f32)>> = lo
        .outputs
        .iter()
        .zip(&hi.outputs)
        .map(|(l, h)| l.iter().copied().zip(h.iter().copied()).collect())
        .collect();

    let mut codes = Vec::with_capacity(n);
    for (w, r) in rotated.iter().enumerate() {
        let mut rng = ctx.seeds.worker("thc-rounding", ctx.round, w);
        let payload = thc_quantize(r, &geom, &shared[w], q, &mut rng, spec.sign_seed())?;
        let CompressedPayload::Quant { codes: c, .. } = payload else {
            unreachable!("thc_quantize returns a Quant payload")
        };
        codes.push(c.into_iter().map(i32::from).collect::<Vec<i32>>());
    }
    let code_sigma = {
        let count = (n * padded) as f64;
        let (s, s2) = codes.iter().flatten().fold((0f64, 0f64), |(s, s2), &z| {
            let z = f64::from(z);
            (s + z, s2 + z * z)
        });
        let m = s / count;
        (s2 / count - m * m).max(0.0).sqrt()
    };
    let summed = ring_all_reduce(&ctx.group, &codes, ReduceOp::SatIntSum { bits: b }, Wire::int(b), PHASE_THC_CODES, &mut ledger)?;

    let restore = |rot: Vec<f32>, scale: f32| -> Result<Vec<f32>> {
        let mut out = rht_inverse_raw(&rot, &spec)?;
        out.truncate(d);
        Ok(out.into_iter().map(|x| x / scale).collect())
    };
    let per_worker = summed
        .outputs
        .iter()
        .zip(&shared)
        .map(|(z, ranges)| restore(thc_dequantize(z, &geom, ranges, q, n)?, n as f32))
        .collect::<Result<Vec<_>>>()?;
    let local = codes
        .iter()
        .zip(&shared)
        .map(|(z, ranges)| restore(thc_dequantize(z, &geom, ranges, q, 1)?, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let mut overflow = summed.stats;
    overflow.code_sigma = Some(code_sigma);
    finish(grads, consensus(per_worker)?, ledger, overflow, local, None)
}

/// Cross-round PowerSGD state: the aggregated `Q` factor of every
/// compressed tensor, reused as the next round's projection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PowerSgdState {
    pub warm_q: Vec<Option<DMatrix<f32>>>,
}

fn segment_seeds(seeds: &SeedSpec, segment: usize) -> SeedSpec {
    SeedSpec::new(seeds.stream_seed("powersgd-segment", segment as u64, None))
}

fn flatten(m: &DMatrix<f32>) -> Vec<f32> {
    m.as_slice().to_vec()
}

/// Low-rank aggregation. `layout` lists the sizes of the parameter tensors
/// packed in each gradient (summing to `d`); each tensor of at least
/// [`POWERSGD_MIN_COMPRESS`] coordinates is reshaped to its most-square
/// matrix and compressed, smaller ones are all-reduced densely in FP32.
///
/// Per tensor: `P = M·Q` is summed, orthogonalized to `P̂`, then
/// `Q' = Mᵀ·P̂` is summed and the estimate is `P̂·Q'ᵀ / n`.
pub fn run_powersgd_round(
    ctx: &RoundContext,
    grads: &[GradientVector],
    layout: &[usize],
    rank: usize,
    state: Option<&mut PowerSgdState>,
) -> Result<RoundResult> {
    run_powersgd_round_with_threshold(ctx, grads, layout, rank, state, POWERSGD_MIN_COMPRESS)
}

pub fn run_powersgd_round_with_threshold(
    ctx: &RoundContext,
    grads: &[GradientVector],
    layout: &[usize],
    rank: usize,
    mut state: Option<&mut PowerSgdState>,
    min_compress: usize,
) -> Result<RoundResult> {
    let d = check_inputs(ctx, grads)?;
    CompressorConfig::PowerSgd {
        rank,
        warm_start: state.is_some(),
    }
    .validate(d)?;
    if layout.iter().sum::<usize>() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            actual: layout.iter().sum(),
        });
    }
    if let Some(st) = state.as_deref_mut() {
        st.warm_q.resize(layout.len(), None);
    }
    let n = ctx.group.size();
    let mut ledger = TrafficLedger::new();
    let mut per_worker = vec![vec![0f32; d]; n];
    let mut local = vec![vec![0f32; d]; n];

    let mut offset = 0;
    for (seg, &len) in layout.iter().enumerate() {
        let range = offset..offset + len;
        offset += len;
        let (rows, cols) = matrix_shape(len);
        if len < min_compress || rank > rows.min(cols) {
            let inputs: Vec<Vec<f32>> = grads.iter().map(|g| g.logical()[range.clone()].to_vec()).collect();
            let sum = ring_all_reduce(&ctx.group, &inputs, ReduceOp::FloatSum, Wire::FP32, PHASE_POWERSGD_DENSE, &mut ledger)?;
            for w in 0..n {
                for (dst, &x) in per_worker[w][range.clone()].iter_mut().zip(&sum.outputs[w]) {
                    *dst = x / n as f32;
                }
                local[w][range.clone()].copy_from_slice(&inputs[w]);
            }
            continue;
        }

        let seeds = segment_seeds(&ctx.seeds, seg);
        let warm = state
            .as_deref()
            .and_then(|s| s.warm_q[seg].clone())
            .filter(|q| q.nrows() == cols && q.ncols() == rank && has_full_column_rank(q));
        let q = match warm {
            Some(q) => q,
            None => draw_q(cols, rank, &seeds, ctx.round)?,
        };
        let mats: Vec<DMatrix<f32>> = grads
            .iter()
            .map(|g| crate::compressors::to_matrix(&g.logical()[range.clone()]))
            .collect();

        let ps: Vec<Vec<f32>> = mats.iter().map(|m| flatten(&(m * &q))).collect();
        let p_sum = ring_all_reduce(&ctx.group, &ps, ReduceOp::FloatSum, Wire::FP32, PHASE_POWERSGD_P, &mut ledger)?;
        let p_hats: Vec<DMatrix<f32>> = p_sum
            .outputs
            .iter()
            .map(|p| orthogonalize(&DMatrix::from_vec(rows, rank, p.clone()), &mut fill_stream(&seeds, ctx.round)))
            .collect();

        let qs: Vec<Vec<f32>> = mats
            .iter()
            .zip(&p_hats)
            .map(|(m, p_hat)| flatten(&(m.transpose() * p_hat)))
            .collect();
        let q_sum = ring_all_reduce(&ctx.group, &qs, ReduceOp::FloatSum, Wire::FP32, PHASE_POWERSGD_Q, &mut ledger)?;

        for w in 0..n {
            let q_agg = DMatrix::from_vec(cols, rank, q_sum.outputs[w].clone());
            let approx = &p_hats[w] * q_agg.transpose() / n as f32;
            let flat = crate::compressors::from_matrix(&approx, len);
            per_worker[w][range.clone()].copy_from_slice(&flat);

            let own_q = DMatrix::from_vec(cols, rank, qs[w].clone());
            let own = &p_hats[w] * own_q.transpose();
            local[w][range.clone()].copy_from_slice(&crate::compressors::from_matrix(&own, len));
        }
        if let Some(st) = state.as_deref_mut() {
            st.warm_q[seg] = Some(DMatrix::from_vec(cols, rank, q_sum.outputs[0].clone()));
        }
    }
    finish(grads, consensus(per_worker)?, ledger, OverflowStats::default(), local, None)
}

/// Uncompressed ring all-reduce. The FP16 path rounds the inputs and every
/// transmitted partial sum to half precision while adding in FP32.
pub fn run_dense_round(ctx: &RoundContext, grads: &[GradientVector], precision: Precision) -> Result<RoundResult> {
    let d = check_inputs(ctx, grads)?;
    let n = ctx.group.size();
    let mut ledger = TrafficLedger::new();
    let (inputs, wire): (Vec<Vec<f32>>, Wire) = match precision {
        Precision::Fp32 => (grads.iter().map(|g| g.logical().to_vec()).collect(), Wire::FP32),
        Precision::Fp16 => (
            grads
                .iter()
                .map(|g| g.logical().iter().map(|&x| fp16_round_trip(x)).collect())
                .collect(),
            Wire::FP16,
        ),
    };
    let sum = ring_all_reduce(&ctx.group, &inputs, ReduceOp::FloatSum, wire, PHASE_DENSE, &mut ledger)?;
    let per_worker = sum
        .outputs
        .iter()
        .map(|s| s.iter().map(|&x| x / n as f32).collect())
        .collect();
    debug_assert_eq!(inputs[0].len(), d);
    finish(grads, consensus(per_worker)?, ledger, OverflowStats::default(), inputs, None)
}

/// A compression scheme as run by an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheme {
    pub label: String,
    pub config: CompressorConfig,
    /// Chunked TopK on randomly permuted coordinates.
    pub permuted: bool,
    pub error_feedback: bool,
}

impl Scheme {
    pub fn new(label: impl Into<String>, config: CompressorConfig) -> Self {
        let error_feedback = !matches!(config, CompressorConfig::DenseFp16 | CompressorConfig::DenseFp32);
        Self {
            label: label.into(),
            config,
            permuted: false,
            error_feedback,
        }
    }

    pub fn permuted(mut self) -> Self {
        self.permuted = true;
        self
    }

    pub fn with_error_feedback(mut self, on: bool) -> Self {
        self.error_feedback = on;
        self
    }
}

/// Stateful multi-round aggregation: error-feedback residuals per worker and
/// PowerSGD warm starts.
#[derive(Debug, Clone)]
pub struct Aggregator {
    scheme: Scheme,
    group: WorkerGroup,
    seeds: SeedSpec,
    layout: Vec<usize>,
    residuals: Vec<ResidualBuffer>,
    powersgd: PowerSgdState,
}

impl Aggregator {
    /// `layout` lists tensor sizes inside the flat gradient (used by
    /// PowerSGD only); an empty layout means one tensor of size `d`.
    pub fn new(scheme: Scheme, group: WorkerGroup, seeds: SeedSpec, d: usize, layout: Vec<usize>) -> Result<Self> {
        scheme.config.validate(d)?;
        let layout = if layout.is_empty() { vec![d] } else { layout };
        if layout.iter().sum::<usize>() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                actual: layout.iter().sum(),
            });
        }
        Ok(Self {
            residuals: (0..group.size()).map(|_| ResidualBuffer::new(d)).collect(),
            scheme,
            group,
            seeds,
            layout,
            powersgd: PowerSgdState::default(),
        })
    }

    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    pub fn residual(&self, worker: usize) -> &[f32] {
        self.residuals[worker].as_slice()
    }

    /// Aggregates one round. The reported NMSE is against the exact mean
    /// of the raw (residual-free) gradients.
    pub fn aggregate(&mut self, grads: &[Vec<f32>], round: u64) -> Result<RoundResult> {
        let ctx = RoundContext::new(self.group, self.seeds, round);
        let corrected: Vec<Vec<f32>> = if self.scheme.error_feedback {
            grads
                .iter()
                .zip(&self.residuals)
                .map(|(g, r)| r.ef_apply(g))
                .collect::<Result<_>>()?
        } else {
            grads.to_vec()
        };
        let vectors = corrected
            .iter()
            .map(|g| pad_to_pow2(g))
            .collect::<Result<Vec<_>>>()?;
        let mut result = match self.scheme.config {
            CompressorConfig::TopK { k } => run_topk_round(&ctx, &vectors, k)?,
            CompressorConfig::TopKC { chunk_size, chunks } if self.scheme.permuted => {
                run_topkc_permuted_round(&ctx, &vectors, chunk_size, chunks)?
            }
            CompressorConfig::TopKC { chunk_size, chunks } => run_topkc_round(&ctx, &vectors, chunk_size, chunks)?,
            CompressorConfig::Thc { q, b, depth } => run_thc_round(&ctx, &vectors, q, b, depth)?,
            CompressorConfig::PowerSgd { rank, warm_start } => {
                let state = warm_start.then_some(&mut self.powersgd);
                run_powersgd_round(&ctx, &vectors, &self.layout, rank, state)?
            }
            CompressorConfig::DenseFp16 => run_dense_round(&ctx, &vectors, Precision::Fp16)?,
            CompressorConfig::DenseFp32 => run_dense_round(&ctx, &vectors, Precision::Fp32)?,
        };
        if self.scheme.error_feedback {
            for ((res, c), local) in self
                .residuals
                .iter_mut()
                .zip(&corrected)
                .zip(&result.local_reconstructions)
            {
                res.ef_update(c, local)?;
            }
        }
        let raw = grads
            .iter()
            .map(|g| pad_to_pow2(g))
            .collect::<Result<Vec<_>>>()?;
        result.nmse = nmse_or_none(result.estimate.logical(), &exact_mean(&raw));
        Ok(result)
    }
}

/// One CSV row of per-round diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub scheme: String,
    pub nmse: f64,
    pub bits_per_coord: f64,
    pub overflow_rate: f64,
    pub simulated_ms: f64,
}

impl RoundRecord {
    pub fn from_result(round: u64, scheme: &str, result: &RoundResult, model: &TimeModel) -> Self {
        Self {
            round,
            scheme: scheme.to_string(),
            nmse: result.nmse.unwrap_or(f64::NAN),
            bits_per_coord: result.input_bits_per_coord(),
            overflow_rate: overflow_rate(&result.overflow),
            simulated_ms: simulated_round_time(&result.ledger, model, scheme) * 1e3,
        }
    }
}

/// Writes `round,scheme,nmse,bits_per_coord,overflow_rate,simulated_ms`.
pub fn write_round_records<W: Write>(out: W, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
