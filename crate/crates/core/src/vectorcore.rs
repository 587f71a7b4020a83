//! Dense gradient buffers, chunk geometry, the FP16 codec and seeded
//! randomness shared across simulated workers.
//!
//! # Stream derivation
//!
//! Every random stream in the crate is a ChaCha8 generator keyed from a
//! 64-bit stream seed. The stream seed is a pure function of
//! `(experiment_seed, tag, round, worker)`:
//!
//! ```text
//! h = splitmix64(experiment_seed)
//! h = splitmix64(h ^ fnv1a64(tag))
//! h = splitmix64(h ^ round)
//! h = splitmix64(h ^ w)        where w = 0 for shared streams, worker + 1 otherwise
//! ```
//!
//! The 32-byte ChaCha key is four consecutive splitmix64 outputs starting
//! from state `h`, each written little-endian. `splitmix64` is the standard
//! finalizer (`0x9E3779B97F4A7C15` increment, multipliers
//! `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`) and `fnv1a64` uses offset
//! basis `0xcbf29ce484222325` and prime `0x100000001b3` over the UTF-8 bytes.

use std::ops::Range;

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest finite IEEE half-precision value.
pub const FP16_MAX: f32 = 65504.0;

/// Dense FP32 gradient with its logical length and power-of-two padding.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f32>,
    logical_len: usize,
}

impl GradientVector {
    /// Wraps an already padded buffer. `values.len()` must be the least power
    /// of two `>= logical_len` and the tail must be zero.
    pub fn from_padded(values: Vec<f32>, logical_len: usize) -> Result<Self> {
        if logical_len == 0 {
            return Err(Error::Empty);
        }
        let padded = logical_len.next_power_of_two();
        if values.len() != padded {
            return Err(Error::LengthMismatch {
                expected: padded,
                actual: values.len(),
            });
        }
        check_finite(&values)?;
        if let Some(i) = values[logical_len..].iter().position(|&x| x != 0.0) {
            return Err(Error::Payload(format!(
                "padding coordinate {} is non-zero",
                logical_len + i
            )));
        }
        Ok(Self {
            values,
            logical_len,
        })
    }

    pub fn zeros(logical_len: usize) -> Result<Self> {
        if logical_len == 0 {
            return Err(Error::Empty);
        }
        Ok(Self {
            values: vec![0.0; logical_len.next_power_of_two()],
            logical_len,
        })
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn padded_len(&self) -> usize {
        self.values.len()
    }

    /// The first `logical_len` coordinates.
    pub fn logical(&self) -> &[f32] {
        &self.values[..self.logical_len]
    }

    /// All coordinates including the zero tail.
    pub fn padded(&self) -> &[f32] {
        &self.values
    }

    pub fn into_padded(self) -> Vec<f32> {
        self.values
    }

    pub fn sq_norm(&self) -> f64 {
        self.logical().iter().map(|&x| f64::from(x) * f64::from(x)).sum()
    }
}

/// Pads `v` with zeros to the next power of two.
pub fn pad_to_pow2(v: &[f32]) -> Result<GradientVector> {
    if v.is_empty() {
        return Err(Error::Empty);
    }
    check_finite(v)?;
    let mut values = Vec::with_capacity(v.len().next_power_of_two());
    values.extend_from_slice(v);
    values.resize(v.len().next_power_of_two(), 0.0);
    Ok(GradientVector {
        values,
        logical_len: v.len(),
    })
}

pub(crate) fn check_finite(v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: v[index],
        }),
        None => Ok(()),
    }
}

/// Rounds to the nearest IEEE half (ties to even) and widens back.
/// Magnitudes beyond the half range saturate to `±65504`.
pub fn fp16_round_trip(x: f32) -> f32 {
    f16::from_f32(x.clamp(-FP16_MAX, FP16_MAX)).to_f32()
}

pub fn fp16_round_slice(values: &mut [f32]) {
    for v in values {
        *v = fp16_round_trip(*v);
    }
}

pub fn to_fp16_bits(x: f32) -> u16 {
    f16::from_f32(x.clamp(-FP16_MAX, FP16_MAX)).to_bits()
}

pub fn from_fp16_bits(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// Partition of the logical coordinates into fixed-size chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkGeometry {
    chunk_size: usize,
    num_chunks: usize,
    logical_len: usize,
}

impl ChunkGeometry {
    pub fn new(logical_len: usize, chunk_size: usize) -> Result<Self> {
        if logical_len == 0 {
            return Err(Error::Empty);
        }
        if chunk_size == 0 {
            return Err(Error::out_of_range("chunk_size", 0.0, ">= 1"));
        }
        Ok(Self {
            chunk_size,
            num_chunks: logical_len.div_ceil(chunk_size),
            logical_len,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    /// Logical coordinates of chunk `p`; the last chunk may be short.
    pub fn chunk_range(&self, p: usize) -> Range<usize> {
        let start = p * self.chunk_size;
        start..(start + self.chunk_size).min(self.logical_len)
    }
}

/// Squared L2 norm of every chunk.
pub fn chunk_sq_norms(v: &GradientVector, geom: &ChunkGeometry) -> Result<Vec<f32>> {
    if geom.logical_len() != v.logical_len() {
        return Err(Error::LengthMismatch {
            expected: v.logical_len(),
            actual: geom.logical_len(),
        });
    }
    let data = v.logical();
    Ok((0..geom.num_chunks())
        .map(|p| {
            data[geom.chunk_range(p)]
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>() as f32
        })
        .collect())
}

pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Root of all randomness in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub experiment_seed: u64,
}

impl SeedSpec {
    pub fn new(experiment_seed: u64) -> Self {
        Self { experiment_seed }
    }

    /// `worker = None` gives the stream shared by every worker.
    pub fn stream_seed(&self, tag: &str, round: u64, worker: Option<usize>) -> u64 {
        let w = worker.map_or(0, |w| w as u64 + 1);
        let mut h = splitmix64(self.experiment_seed);
        h = splitmix64(h ^ fnv1a64(tag.as_bytes()));
        h = splitmix64(h ^ round);
        splitmix64(h ^ w)
    }

    pub fn stream(&self, tag: &str, round: u64, worker: Option<usize>) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.stream_seed(tag, round, worker);
        for word in key.chunks_exact_mut(8) {
            word.copy_from_slice(&state.to_le_bytes());
            state = splitmix64(state);
        }
        ChaCha8Rng::from_seed(key)
    }

    pub fn shared(&self, tag: &str, round: u64) -> ChaCha8Rng {
        self.stream(tag, round, None)
    }

    pub fn worker(&self, tag: &str, round: u64, worker: usize) -> ChaCha8Rng {
        self.stream(tag, round, Some(worker))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    /// Decodes half-precision bits without the `half` crate.
    fn half_bits_to_f64(bits: u16) -> f64 {
        let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = i32::from((bits >> 10) & 0x1f);
        let frac = f64::from(bits & 0x3ff);
        match exp {
            0 => sign * frac * 2f64.powi(-24),
            31 => f64::NAN,
            e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
        }
    }

    /// Nearest finite half by enumeration, ties to the even mantissa.
    fn nearest_half_oracle(x: f32) -> f64 {
        let x = f64::from(x);
        let mut best = (f64::INFINITY, 0.0, 0u16);
        for bits in 0..=u16::MAX {
            let h = half_bits_to_f64(bits);
            if !h.is_finite() {
                continue;
            }
            let err = (h - x).abs();
            if err < best.0 || (err == best.0 && bits & 1 == 0 && best.2 & 1 == 1) {
                best = (err, h, bits);
            }
        }
        best.1
    }

    #[test]
    fn pad_small_vectors() {
        let g = pad_to_pow2(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.logical_len(), 3);
        assert_eq!(g.padded_len(), 4);
        assert_eq!(g.padded(), &[1.0, 2.0, 3.0, 0.0]);

        let g = pad_to_pow2(&[5.0]).unwrap();
        assert_eq!((g.logical_len(), g.padded_len()), (1, 1));
    }

    #[test]
    fn pad_random_thousand() {
        let mut rng = SeedSpec::new(3).shared("pad", 0);
        let v: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = pad_to_pow2(&v).unwrap();
        let expected = 2usize.pow((1000f64).log2().ceil() as u32);
        assert_eq!(g.padded_len(), expected);
        assert_eq!(g.padded()[1000..].iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn pad_rejects_non_finite() {
        match pad_to_pow2(&[1.0, f32::NAN, 2.0]) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(pad_to_pow2(&[]), Err(Error::Empty)));
        assert!(pad_to_pow2(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn fp16_examples() {
        assert_eq!(fp16_round_trip(1.0), 1.0);
        assert_eq!(f64::from(fp16_round_trip(0.1)), 0.0999755859375);
        assert_eq!(nearest_half_oracle(0.1), 0.0999755859375);
        assert_eq!(fp16_round_trip(70000.0), 65504.0);
        assert_eq!(fp16_round_trip(-1e9), -65504.0);
    }

    #[test]
    fn fp16_matches_enumeration_oracle() {
        let mut rng = SeedSpec::new(11).shared("fp16", 0);
        for _ in 0..200 {
            let x: f32 = rng.random_range(-60000.0..60000.0) * 10f32.powi(rng.random_range(-8..0));
            assert_eq!(f64::from(fp16_round_trip(x)), nearest_half_oracle(x), "x = {x}");
        }
        // exact tie between 1.0 and 1.0 + 2^-10 goes to the even mantissa
        let tie = 1.0 + 2f32.powi(-11);
        assert_eq!(fp16_round_trip(tie), 1.0);
    }

    #[test]
    fn chunk_norm_examples() {
        let v = pad_to_pow2(&[3.0, 4.0, 0.0, 0.0]).unwrap();
        let geom = ChunkGeometry::new(4, 2).unwrap();
        assert_eq!(chunk_sq_norms(&v, &geom).unwrap(), vec![25.0, 0.0]);

        let z = GradientVector::zeros(10).unwrap();
        let geom = ChunkGeometry::new(10, 4).unwrap();
        assert_eq!(geom.num_chunks(), 3);
        assert_eq!(geom.chunk_range(2), 8..10);
        assert_eq!(chunk_sq_norms(&z, &geom).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn chunk_norms_match_naive_loop() {
        let mut rng = SeedSpec::new(5).shared("norms", 0);
        let v: Vec<f32> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = pad_to_pow2(&v).unwrap();
        let geom = ChunkGeometry::new(200, 8).unwrap();
        let got = chunk_sq_norms(&g, &geom).unwrap();
        let mut naive = vec![0f64; 25];
        for (i, &x) in v.iter().enumerate() {
            naive[i / 8] += f64::from(x) * f64::from(x);
        }
        for (a, b) in got.iter().zip(&naive) {
            assert!((f64::from(*a) - b).abs() <= 1e-6 * b.max(1.0));
        }
    }

    #[test]
    fn shared_streams_agree_across_workers() {
        let seeds = SeedSpec::new(42);
        let a: Vec<u64> = (0..16).map({
            let mut r = seeds.shared("signs", 7);
            move |_| r.next_u64()
        }).collect();
        let b: Vec<u64> = (0..16).map({
            let mut r = seeds.shared("signs", 7);
            move |_| r.next_u64()
        }).collect();
        assert_eq!(a, b);
        assert_ne!(seeds.stream_seed("signs", 7, Some(0)), seeds.stream_seed("signs", 7, Some(1)));
        assert_ne!(seeds.stream_seed("signs", 7, None), seeds.stream_seed("signs", 8, None));
        assert_ne!(seeds.stream_seed("signs", 7, None), seeds.stream_seed("perm", 7, None));
    }

    #[test]
    fn stream_seed_is_published_function() {
        // pinned so other implementations can check their derivation
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    proptest! {
        #[test]
        fn chunk_norms_sum_to_total(v in prop::collection::vec(-100f32..100.0, 1..300), c in 1usize..40) {
            let g = pad_to_pow2(&v).unwrap();
            let geom = ChunkGeometry::new(v.len(), c).unwrap();
            let total: f64 = chunk_sq_norms(&g, &geom).unwrap().iter().map(|&x| f64::from(x)).sum();
            let exact = g.sq_norm();
            prop_assert!((total - exact).abs() <= 1e-6 * exact.max(1e-30));
        }

        #[test]
        fn fp16_is_idempotent(x in -1e6f32..1e6) {
            let once = fp16_round_trip(x);
            prop_assert_eq!(fp16_round_trip(once).to_bits(), once.to_bits());
        }
    }
}
