//! Compressor configurations, payload encodings and the per-scheme
//! compression primitives: TopK, chunked TopK, rotated stochastic
//! quantization, PowerSGD and the dense baselines, plus error feedback.
//!
//! # Payload binary layout
//!
//! [`CompressedPayload::encode`] writes little-endian bytes: one tag byte
//! (`1` Sparse, `2` ChunkSet, `3` Quant, `4` LowRank, `5` Dense) followed by
//! the arm's fields in declaration order. Sequences are prefixed by a `u32`
//! element count, matrices by `u32` rows and `u32` cols followed by the
//! column-major `f32` data. FP16 words are raw IEEE half bits (`u16`),
//! quantization codes are `i8`, a range is an `f32` min followed by an
//! `f32` max, and a [`Precision`] is the byte `16` or `32`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::transforms::{rht_forward_raw, rht_inverse_raw, RotationSpec};
use crate::vectorcore::{
    check_finite, chunk_sq_norms, fp16_round_trip, from_fp16_bits, to_fp16_bits, ChunkGeometry,
    GradientVector, SeedSpec,
};

/// Tensors smaller than this many coordinates skip low-rank compression.
pub const POWERSGD_MIN_COMPRESS: usize = 4096;

const POWERSGD_Q_TAG: &str = "powersgd-q";
const POWERSGD_FILL_TAG: &str = "powersgd-fill";
const THC_ROUNDING_TAG: &str = "thc-rounding";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Fp16,
    Fp32,
}

impl Precision {
    pub fn bits(&self) -> u32 {
        match self {
            Precision::Fp16 => 16,
            Precision::Fp32 => 32,
        }
    }
}

/// Resolved parameters of one compression scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressorConfig {
    TopK {
        k: usize,
    },
    TopKC {
        chunk_size: usize,
        chunks: usize,
    },
    Thc {
        q: u32,
        /// Width of the saturating all-reduce, `b >= q`.
        b: u32,
        /// Butterfly stages of the rotation; `None` means full rotation.
        depth: Option<u32>,
    },
    PowerSgd {
        rank: usize,
        warm_start: bool,
    },
    DenseFp16,
    DenseFp32,
}

impl CompressorConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        match *self {
            CompressorConfig::TopK { k } => {
                if k == 0 || k > d {
                    return Err(Error::out_of_range("k", k as f64, format!("1..={d}")));
                }
            }
            CompressorConfig::TopKC { chunk_size, chunks } => {
                if chunk_size == 0 {
                    return Err(Error::out_of_range("chunk_size", 0.0, ">= 1"));
                }
                let total = d.div_ceil(chunk_size);
                if chunks == 0 || chunks > total {
                    return Err(Error::out_of_range("chunks", chunks as f64, format!("1..={total}")));
                }
            }
            CompressorConfig::Thc { q, b, depth } => {
                check_q(q)?;
                if b < q || b > 32 {
                    return Err(Error::out_of_range("b", b, format!("{q}..=32")));
                }
                let full = d.next_power_of_two().trailing_zeros();
                if let Some(l) = depth {
                    if l > full {
                        return Err(Error::out_of_range("depth", l, format!("<= {full}")));
                    }
                }
            }
            CompressorConfig::PowerSgd { rank, .. } => {
                if rank == 0 {
                    return Err(Error::out_of_range("rank", 0.0, ">= 1"));
                }
            }
            CompressorConfig::DenseFp16 | CompressorConfig::DenseFp32 => {}
        }
        Ok(())
    }

    /// Levels of the quantization grid (`2^q - 1`, symmetric around zero).
    pub fn levels(&self) -> Option<u32> {
        match self {
            CompressorConfig::Thc { q, .. } => Some((1 << q) - 1),
            _ => None,
        }
    }
}

fn check_q(q: u32) -> Result<()> {
    if !(2..=8).contains(&q) {
        return Err(Error::out_of_range("q", q, "2..=8"));
    }
    Ok(())
}

/// What a worker puts on the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressedPayload {
    Sparse {
        indices: Vec<u32>,
        values: Vec<u16>,
    },
    ChunkSet {
        chunk_size: u32,
        chunk_ids: Vec<u32>,
        values: Vec<u16>,
    },
    Quant {
        q: u8,
        chunk_size: u32,
        codes: Vec<i8>,
        ranges: Vec<(f32, f32)>,
        rotation_id: u64,
    },
    LowRank {
        p: DMatrix<f32>,
        q: DMatrix<f32>,
        shape: (u32, u32),
    },
    Dense {
        precision: Precision,
        values: Vec<f32>,
    },
}

/// Accounted size of a payload in bits.
pub fn payload_bits(payload: &CompressedPayload) -> u64 {
    match payload {
        CompressedPayload::Sparse { indices, .. } => 48 * indices.len() as u64,
        CompressedPayload::ChunkSet { values, .. } => 16 * values.len() as u64,
        CompressedPayload::Quant {
            q, codes, ranges, ..
        } => u64::from(*q) * codes.len() as u64 + 64 * ranges.len() as u64,
        CompressedPayload::LowRank { p, q, .. } => {
            let r = p.ncols() as u64;
            32 * r * (p.nrows() as u64 + q.nrows() as u64)
        }
        CompressedPayload::Dense { precision, values } => {
            u64::from(precision.bits()) * values.len() as u64
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Payload(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(Error::Payload(format!("implausible count {n}")));
        }
        Ok(n)
    }

    fn matrix(&mut self) -> Result<DMatrix<f32>> {
        let rows = self.count()?;
        let cols = self.count()?;
        let data = (0..rows * cols).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(rows, cols, data))
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f32>) {
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl CompressedPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let len = |out: &mut Vec<u8>, n: usize| out.extend_from_slice(&(n as u32).to_le_bytes());
        match self {
            CompressedPayload::Sparse { indices, values } => {
                out.push(1);
                len(&mut out, indices.len());
                indices.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
                len(&mut out, values.len());
                values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            CompressedPayload::ChunkSet {
                chunk_size,
                chunk_ids,
                values,
            } => {
                out.push(2);
                out.extend_from_slice(&chunk_size.to_le_bytes());
                len(&mut out, chunk_ids.len());
                chunk_ids.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
                len(&mut out, values.len());
                values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            CompressedPayload::Quant {
                q,
                chunk_size,
                codes,
                ranges,
                rotation_id,
            } => {
                out.push(3);
                out.push(*q);
                out.extend_from_slice(&chunk_size.to_le_bytes());
                len(&mut out, codes.len());
                codes.iter().for_each(|&c| out.push(c as u8));
                len(&mut out, ranges.len());
                for (lo, hi) in ranges {
                    out.extend_from_slice(&lo.to_le_bytes());
                    out.extend_from_slice(&hi.to_le_bytes());
                }
                out.extend_from_slice(&rotation_id.to_le_bytes());
            }
            CompressedPayload::LowRank { p, q, shape } => {
                out.push(4);
                put_matrix(&mut out, p);
                put_matrix(&mut out, q);
                out.extend_from_slice(&shape.0.to_le_bytes());
                out.extend_from_slice(&shape.1.to_le_bytes());
            }
            CompressedPayload::Dense { precision, values } => {
                out.push(5);
                out.push(precision.bits() as u8);
                len(&mut out, values.len());
                for &v in values {
                    match precision {
                        Precision::Fp16 => out.extend_from_slice(&to_fp16_bits(v).to_le_bytes()),
                        Precision::Fp32 => out.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let payload = match r.u8()? {
            1 => {
                let n = r.count()?;
                let indices = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
                let n = r.count()?;
                let values = (0..n).map(|_| r.u16()).collect::<Result<_>>()?;
                CompressedPayload::Sparse { indices, values }
            }
            2 => {
                let chunk_size = r.u32()?;
                let n = r.count()?;
                let chunk_ids = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
                let n = r.count()?;
                let values = (0..n).map(|_| r.u16()).collect::<Result<_>>()?;
                CompressedPayload::ChunkSet {
                    chunk_size,
                    chunk_ids,
                    values,
                }
            }
            3 => {
                let q = r.u8()?;
                let chunk_size = r.u32()?;
                let n = r.count()?;
                let codes = (0..n).map(|_| r.u8().map(|b| b as i8)).collect::<Result<_>>()?;
                let n = r.count()?;
                let ranges = (0..n)
                    .map(|_| Ok((r.f32()?, r.f32()?)))
                    .collect::<Result<_>>()?;
                let rotation_id = r.u64()?;
                CompressedPayload::Quant {
                    q,
                    chunk_size,
                    codes,
                    ranges,
                    rotation_id,
                }
            }
            4 => {
                let p = r.matrix()?;
                let q = r.matrix()?;
                let shape = (r.u32()?, r.u32()?);
                CompressedPayload::LowRank { p, q, shape }
            }
            5 => {
                let precision = match r.u8()? {
                    16 => Precision::Fp16,
                    32 => Precision::Fp32,
                    other => return Err(Error::Payload(format!("unknown precision {other}"))),
                };
                let n = r.count()?;
                let values = (0..n)
                    .map(|_| match precision {
                        Precision::Fp16 => r.u16().map(from_fp16_bits),
                        Precision::Fp32 => r.f32(),
                    })
                    .collect::<Result<_>>()?;
                CompressedPayload::Dense { precision, values }
            }
            tag => return Err(Error::Payload(format!("unknown tag {tag}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Payload(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(payload)
    }
}

/// Orders by magnitude descending, then index ascending.
fn rank_cmp(values: &[f32]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    }
}

/// Indices of the `k` largest-magnitude coordinates, in rank order; ties go
/// to the lower index.
pub fn topk_select(v: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::out_of_range("k", k as f64, format!("1..={}", v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let cmp = rank_cmp(v);
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    Ok(idx)
}

/// Sparse payload of the top-`k` coordinates with FP16 values.
pub fn topk_compress(v: &[f32], k: usize) -> Result<CompressedPayload> {
    let idx = topk_select(v, k)?;
    Ok(CompressedPayload::Sparse {
        indices: idx.iter().map(|&i| i as u32).collect(),
        values: idx.iter().map(|&i| to_fp16_bits(v[i])).collect(),
    })
}

/// The `j` chunks with the largest aggregated norms, sorted by chunk id.
/// Ties go to the lower id, so every worker holding the same `s` agrees.
pub fn topkc_select_chunks(aggregated_norms: &[f32], j: usize) -> Result<Vec<usize>> {
    let mut ids = topk_by_value(aggregated_norms, j)?;
    ids.sort_unstable();
    Ok(ids)
}

fn topk_by_value(s: &[f32], j: usize) -> Result<Vec<usize>> {
    if j == 0 || j > s.len() {
        return Err(Error::out_of_range("chunks", j as f64, format!("1..={}", s.len())));
    }
    let mut idx: Vec<usize> = (0..s.len()).collect();
    let cmp = |&a: &usize, &b: &usize| s[b].total_cmp(&s[a]).then(a.cmp(&b));
    if j < idx.len() {
        idx.select_nth_unstable_by(j - 1, cmp);
        idx.truncate(j);
    }
    Ok(idx)
}

/// Local FP16 chunk norms, the phase-1 input of chunked TopK.
pub fn topkc_local_norms(v: &GradientVector, geom: &ChunkGeometry) -> Result<Vec<f32>> {
    let mut norms = chunk_sq_norms(v, geom)?;
    norms.iter_mut().for_each(|x| *x = fp16_round_trip(*x));
    Ok(norms)
}

/// FP16 values of the selected chunks, each padded to the full chunk size.
pub fn topkc_gather(v: &[f32], geom: &ChunkGeometry, chunk_ids: &[usize]) -> Vec<f32> {
    let c = geom.chunk_size();
    let mut out = Vec::with_capacity(chunk_ids.len() * c);
    for &p in chunk_ids {
        let range = geom.chunk_range(p);
        let fill = c - range.len();
        out.extend(v[range].iter().map(|&x| fp16_round_trip(x)));
        out.extend(std::iter::repeat_n(0.0, fill));
    }
    out
}

/// Inverse of [`topkc_gather`]: writes chunk values back into a dense vector.
pub fn topkc_scatter(values: &[f32], geom: &ChunkGeometry, chunk_ids: &[usize], out: &mut [f32]) {
    let c = geom.chunk_size();
    for (slot, &p) in chunk_ids.iter().enumerate() {
        let range = geom.chunk_range(p);
        let len = range.len();
        out[range].copy_from_slice(&values[slot * c..slot * c + len]);
    }
}

/// Symmetric quantization grid for one chunk: `2^q - 1` points
/// `μ + zΔ`, `z ∈ [-(2^(q-1)-1), 2^(q-1)-1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub half_levels: i32,
}

impl Grid {
    pub fn new(range: (f32, f32), q: u32) -> Self {
        Self {
            min: f64::from(range.0),
            max: f64::from(range.1),
            half_levels: (1 << (q - 1)) - 1,
        }
    }

    pub fn midpoint(&self) -> f64 {
        (self.min + self.max) / 2.0
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / f64::from(2 * self.half_levels)
    }

    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }

    /// Stochastic rounding of `x` (clamped into the range) given a uniform
    /// draw `u ∈ [0, 1)`.
    pub fn code(&self, x: f32, u: f64) -> i8 {
        if self.is_degenerate() {
            return 0;
        }
        let x = f64::from(x).clamp(self.min, self.max);
        let span = f64::from(2 * self.half_levels);
        let pos = ((x - self.min) / (self.max - self.min) * span).clamp(0.0, span);
        let lo = pos.floor();
        let up = if u < pos - lo { 1.0 } else { 0.0 };
        let z = (lo + up).min(span) as i32 - self.half_levels;
        z as i8
    }

    pub fn value(&self, z: i64) -> f64 {
        self.aggregate(z, 1)
    }

    /// `n·μ + Δ·z_sum`.
    pub fn aggregate(&self, z_sum: i64, n: usize) -> f64 {
        if self.is_degenerate() {
            return n as f64 * self.midpoint();
        }
        n as f64 * self.midpoint() + self.step() * z_sum as f64
    }
}

fn check_ranges(geom: &ChunkGeometry, ranges: &[(f32, f32)]) -> Result<()> {
    if ranges.len() != geom.num_chunks() {
        return Err(Error::LengthMismatch {
            expected: geom.num_chunks(),
            actual: ranges.len(),
        });
    }
    for &(lo, hi) in ranges {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::Degenerate(format!("invalid quantization range [{lo}, {hi}]")));
        }
    }
    Ok(())
}

/// Per-chunk `(min, max)` of a buffer.
pub fn chunk_ranges(values: &[f32], geom: &ChunkGeometry) -> Vec<(f32, f32)> {
    (0..geom.num_chunks())
        .map(|p| {
            values[geom.chunk_range(p)]
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
        })
        .collect()
}

/// Stochastic `q`-bit quantization of rotated values on the shared grid.
pub fn thc_quantize<R: Rng + ?Sized>(
    rotated: &[f32],
    geom: &ChunkGeometry,
    shared_ranges: &[(f32, f32)],
    q: u32,
    rng: &mut R,
    rotation_id: u64,
) -> Result<CompressedPayload> {
    check_q(q)?;
    if geom.logical_len() != rotated.len() {
        return Err(Error::LengthMismatch {
            expected: rotated.len(),
            actual: geom.logical_len(),
        });
    }
    check_ranges(geom, shared_ranges)?;
    let mut codes = Vec::with_capacity(rotated.len());
    for (p, &range) in shared_ranges.iter().enumerate() {
        let grid = Grid::new(range, q);
        for &x in &rotated[geom.chunk_range(p)] {
            let u: f64 = rng.random();
            codes.push(grid.code(x, u));
        }
    }
    Ok(CompressedPayload::Quant {
        q: q as u8,
        chunk_size: geom.chunk_size() as u32,
        codes,
        ranges: shared_ranges.to_vec(),
        rotation_id,
    })
}

/// Aggregated rotated-domain values `n·μ + Δ·z_sum` from summed codes.
pub fn thc_dequantize(
    agg_codes: &[i32],
    geom: &ChunkGeometry,
    shared_ranges: &[(f32, f32)],
    q: u32,
    n: usize,
) -> Result<Vec<f32>> {
    check_q(q)?;
    if geom.logical_len() != agg_codes.len() {
        return Err(Error::LengthMismatch {
            expected: agg_codes.len(),
            actual: geom.logical_len(),
        });
    }
    check_ranges(geom, shared_ranges)?;
    let mut out = Vec::with_capacity(agg_codes.len());
    for (p, &range) in shared_ranges.iter().enumerate() {
        let grid = Grid::new(range, q);
        out.extend(
            agg_codes[geom.chunk_range(p)]
                .iter()
                .map(|&z| grid.aggregate(i64::from(z), n) as f32),
        );
    }
    Ok(out)
}

/// Most-square `(rows, cols)` with `rows · cols >= len`.
pub fn matrix_shape(len: usize) -> (usize, usize) {
    let cols = (len as f64).sqrt().ceil().max(1.0) as usize;
    (len.div_ceil(cols), cols)
}

/// Reshapes a flat tensor (zero-padded) into its most-square matrix.
pub fn to_matrix(flat: &[f32]) -> DMatrix<f32> {
    let (rows, cols) = matrix_shape(flat.len());
    DMatrix::from_fn(rows, cols, |i, j| flat.get(i * cols + j).copied().unwrap_or(0.0))
}

pub fn from_matrix(m: &DMatrix<f32>, len: usize) -> Vec<f32> {
    let cols = m.ncols();
    (0..len).map(|k| m[(k / cols, k % cols)]).collect()
}

/// Gaussian `cols × rank` matrix drawn column by column, so the first `r`
/// columns agree for every rank `>= r`.
fn gaussian_columns<R: Rng + ?Sized>(rows: usize, rank: usize, rng: &mut R) -> DMatrix<f32> {
    let mut m = DMatrix::zeros(rows, rank);
    for j in 0..rank {
        for i in 0..rows {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

const RANK_TOL: f64 = 1e-6;

/// Modified Gram-Schmidt in place. Returns the indices of columns that fell
/// below the rank tolerance (left as zero).
fn gram_schmidt(m: &mut DMatrix<f64>) -> Vec<usize> {
    let mut deficient = Vec::new();
    for j in 0..m.ncols() {
        let original = m.column(j).norm();
        for k in 0..j {
            if deficient.contains(&k) {
                continue;
            }
            let proj = m.column(k).dot(&m.column(j));
            let ck = m.column(k).clone_owned();
            m.column_mut(j).axpy(-proj, &ck, 1.0);
        }
        let norm = m.column(j).norm();
        if norm <= RANK_TOL * original.max(f64::MIN_POSITIVE) || norm == 0.0 {
            m.column_mut(j).fill(0.0);
            deficient.push(j);
        } else {
            m.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    deficient
}

/// Orthonormalizes the columns of `p`. Columns that are linearly dependent
/// on earlier ones are replaced by random directions from `fill`, so the
/// result always satisfies `P̂ᵀP̂ = I`.
pub fn orthogonalize<R: Rng + ?Sized>(p: &DMatrix<f32>, fill: &mut R) -> DMatrix<f32> {
    let mut m = p.map(f64::from);
    let deficient = gram_schmidt(&mut m);
    for &j in &deficient {
        for _ in 0..8 {
            let mut col: Vec<f64> = (0..m.nrows()).map(|_| StandardNormal.sample(fill)).collect();
            // two passes against the already orthonormal columns
            for _ in 0..2 {
                for k in 0..m.ncols() {
                    if k == j || (deficient.contains(&k) && k > j) {
                        continue;
                    }
                    let proj: f64 = m.column(k).iter().zip(&col).map(|(a, b)| a * b).sum();
                    for (c, a) in col.iter_mut().zip(m.column(k).iter()) {
                        *c -= proj * a;
                    }
                }
            }
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > RANK_TOL {
                for (i, c) in col.into_iter().enumerate() {
                    m[(i, j)] = c / norm;
                }
                break;
            }
        }
    }
    m.map(|x| x as f32)
}

/// Fresh full-column-rank `cols × rank` matrix for `round`, re-drawn up to
/// three times on rank deficiency.
pub fn draw_q(cols: usize, rank: usize, seeds: &SeedSpec, round: u64) -> Result<DMatrix<f32>> {
    if rank > cols {
        return Err(Error::Degenerate(format!("rank {rank} exceeds {cols} columns")));
    }
    for attempt in 0..=3u64 {
        let tag = if attempt == 0 {
            POWERSGD_Q_TAG.to_string()
        } else {
            format!("{POWERSGD_Q_TAG}-redraw{attempt}")
        };
        let q = gaussian_columns(cols, rank, &mut seeds.shared(&tag, round));
        if gram_schmidt(&mut q.map(f64::from)).is_empty() {
            return Ok(q);
        }
    }
    Err(Error::Degenerate(format!(
        "rank-deficient {cols}x{rank} projection after 3 re-draws"
    )))
}

pub fn has_full_column_rank(q: &DMatrix<f32>) -> bool {
    gram_schmidt(&mut q.map(f64::from)).is_empty()
}

/// Stream used to complete a rank-deficient orthogonal basis.
pub fn fill_stream(seeds: &SeedSpec, round: u64) -> rand_chacha::ChaCha8Rng {
    seeds.shared(POWERSGD_FILL_TAG, round)
}

/// One power-iteration step on a single matrix:
/// `P = M·Q`, `P̂ = orth(P)`, `Q_new = Mᵀ·P̂`.
pub fn powersgd_compress(
    m: &DMatrix<f32>,
    rank: usize,
    q: &DMatrix<f32>,
    seeds: &SeedSpec,
    round: u64,
) -> Result<CompressedPayload> {
    if rank == 0 || rank > m.nrows().min(m.ncols()) {
        return Err(Error::Degenerate(format!(
            "rank {rank} invalid for {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if q.nrows() != m.ncols() || q.ncols() != rank {
        return Err(Error::LengthMismatch {
            expected: m.ncols() * rank,
            actual: q.nrows() * q.ncols(),
        });
    }
    let p = m * q;
    let p_hat = orthogonalize(&p, &mut fill_stream(seeds, round));
    let q_new = m.transpose() * &p_hat;
    Ok(CompressedPayload::LowRank {
        p: p_hat,
        q: q_new,
        shape: (m.nrows() as u32, m.ncols() as u32),
    })
}

/// `M̂ = P̂·Q_newᵀ`.
pub fn powersgd_decompress(payload: &CompressedPayload) -> Result<DMatrix<f32>> {
    match payload {
        CompressedPayload::LowRank { p, q, .. } => Ok(p * q.transpose()),
        _ => Err(Error::Payload("expected a low-rank payload".into())),
    }
}

/// Dense reconstruction of a single-worker payload. Quantized payloads are
/// returned in the rotated domain; [`LocalCompressor::decompress`] undoes
/// the rotation.
pub fn decompress(payload: &CompressedPayload, logical_len: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; logical_len];
    match payload {
        CompressedPayload::Sparse { indices, values } => {
            for (&i, &v) in indices.iter().zip(values) {
                let slot = out.get_mut(i as usize).ok_or_else(|| {
                    Error::Payload(format!("index {i} outside length {logical_len}"))
                })?;
                *slot += from_fp16_bits(v);
            }
        }
        CompressedPayload::ChunkSet {
            chunk_size,
            chunk_ids,
            values,
        } => {
            let geom = ChunkGeometry::new(logical_len, *chunk_size as usize)?;
            let ids: Vec<usize> = chunk_ids.iter().map(|&i| i as usize).collect();
            if ids.iter().any(|&p| p >= geom.num_chunks()) {
                return Err(Error::Payload("chunk id out of range".into()));
            }
            let vals: Vec<f32> = values.iter().map(|&v| from_fp16_bits(v)).collect();
            topkc_scatter(&vals, &geom, &ids, &mut out);
        }
        CompressedPayload::Quant {
            q,
            chunk_size,
            codes,
            ranges,
            ..
        } => {
            let geom = ChunkGeometry::new(codes.len(), *chunk_size as usize)?;
            let wide: Vec<i32> = codes.iter().map(|&c| i32::from(c)).collect();
            out = thc_dequantize(&wide, &geom, ranges, u32::from(*q), 1)?;
        }
        CompressedPayload::LowRank { .. } => {
            let m = powersgd_decompress(payload)?;
            out = from_matrix(&m, logical_len);
        }
        CompressedPayload::Dense { values, .. } => {
            if values.len() != logical_len {
                return Err(Error::LengthMismatch {
                    expected: logical_len,
                    actual: values.len(),
                });
            }
            out.copy_from_slice(values);
        }
    }
    Ok(out)
}

/// Per-worker compressor for single-worker use: every scheme compresses
/// against its own statistics (own chunk norms, own ranges, own matrix).
/// Multi-worker rounds live in [`crate::pipelines`].
#[derive(Debug, Clone)]
pub struct LocalCompressor {
    config: CompressorConfig,
    seeds: SeedSpec,
    worker: usize,
    rotation: Option<RotationSpec>,
    warm_q: Option<DMatrix<f32>>,
}

impl LocalCompressor {
    pub fn new(config: CompressorConfig, seeds: SeedSpec, worker: usize) -> Self {
        Self {
            config,
            seeds,
            worker,
            rotation: None,
            warm_q: None,
        }
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.config
    }

    pub fn compress(&mut self, v: &GradientVector, round: u64) -> Result<CompressedPayload> {
        self.config.validate(v.logical_len())?;
        let d = v.logical_len();
        match self.config {
            CompressorConfig::TopK { k } => topk_compress(v.logical(), k),
            CompressorConfig::TopKC { chunk_size, chunks } => {
                let geom = ChunkGeometry::new(d, chunk_size)?;
                let norms = topkc_local_norms(v, &geom)?;
                let ids = topkc_select_chunks(&norms, chunks)?;
                let values = topkc_gather(v.logical(), &geom, &ids);
                Ok(CompressedPayload::ChunkSet {
                    chunk_size: chunk_size as u32,
                    chunk_ids: ids.iter().map(|&i| i as u32).collect(),
                    values: values.iter().map(|&x| to_fp16_bits(x)).collect(),
                })
            }
            CompressorConfig::Thc { q, depth, .. } => {
                let depth = depth.unwrap_or(v.padded_len().trailing_zeros());
                let spec = RotationSpec::draw(v.padded_len(), depth, &self.seeds, round)?;
                let rotated = rht_forward_raw(v, &spec)?;
                let geom = ChunkGeometry::new(rotated.len(), spec.block_size())?;
                let ranges = chunk_ranges(&rotated, &geom);
                let mut rng = self.seeds.worker(THC_ROUNDING_TAG, round, self.worker);
                let payload = thc_quantize(&rotated, &geom, &ranges, q, &mut rng, spec.sign_seed())?;
                self.rotation = Some(spec);
                Ok(payload)
            }
            CompressorConfig::PowerSgd { rank, warm_start } => {
                let m = to_matrix(v.logical());
                let q = match (&self.warm_q, warm_start) {
                    (Some(q), true) if q.nrows() == m.ncols() && has_full_column_rank(q) => q.clone(),
                    _ => draw_q(m.ncols(), rank, &self.seeds, round)?,
                };
                let payload = powersgd_compress(&m, rank, &q, &self.seeds, round)?;
                if let CompressedPayload::LowRank { q, .. } = &payload {
                    self.warm_q = Some(q.clone());
                }
                Ok(payload)
            }
            CompressorConfig::DenseFp16 => Ok(CompressedPayload::Dense {
                precision: Precision::Fp16,
                values: v.logical().iter().map(|&x| fp16_round_trip(x)).collect(),
            }),
            CompressorConfig::DenseFp32 => Ok(CompressedPayload::Dense {
                precision: Precision::Fp32,
                values: v.logical().to_vec(),
            }),
        }
    }

    /// Reconstruction of this worker's own payload in the original domain.
    pub fn decompress(&self, payload: &CompressedPayload, logical_len: usize) -> Result<Vec<f32>> {
        match payload {
            CompressedPayload::Quant { .. } => {
                let spec = self
                    .rotation
                    .as_ref()
                    .ok_or_else(|| Error::Payload("no rotation recorded for this payload".into()))?;
                let rotated = decompress(payload, spec.len())?;
                let mut out = rht_inverse_raw(&rotated, spec)?;
                out.truncate(logical_len);
                Ok(out)
            }
            _ => decompress(payload, logical_len),
        }
    }
}

/// Per-worker error-feedback memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBuffer {
    residual: Vec<f32>,
}

impl ResidualBuffer {
    pub fn new(d: usize) -> Self {
        Self {
            residual: vec![0.0; d],
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.residual
    }

    /// `g + residual`.
    pub fn ef_apply(&self, g: &[f32]) -> Result<Vec<f32>> {
        if g.len() != self.residual.len() {
            return Err(Error::LengthMismatch {
                expected: self.residual.len(),
                actual: g.len(),
            });
        }
        Ok(g.iter().zip(&self.residual).map(|(a, b)| a + b).collect())
    }

    /// `residual = corrected − reconstructed_local`.
    pub fn ef_update(&mut self, corrected: &[f32], reconstructed_local: &[f32]) -> Result<()> {
        let d = self.residual.len();
        for len in [corrected.len(), reconstructed_local.len()] {
            if len != d {
                return Err(Error::LengthMismatch {
                    expected: d,
                    actual: len,
                });
            }
        }
        let next: Vec<f32> = corrected
            .iter()
            .zip(reconstructed_local)
            .map(|(c, r)| c - r)
            .collect();
        check_finite(&next)?;
        self.residual = next;
        Ok(())
    }
}
