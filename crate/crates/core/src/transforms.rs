//! Randomized Hadamard rotation (full and partial) and the coordinate
//! permutation used by the chunk-locality ablation.
//!
//! A partial rotation of depth `l'` runs only the first `l'` butterfly
//! stages, which is the same as rotating every consecutive block of
//! `2^l'` coordinates on its own. The transform is orthonormal: the
//! `2^{-l'/2}` scale is applied in the forward pass, so the inverse is the
//! plain transpose.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::vectorcore::{GradientVector, SeedSpec};

const SIGN_TAG: &str = "rht-signs";
const PERM_TAG: &str = "permutation";

/// Shared description of one (partial) rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSpec {
    depth_full: u32,
    depth_used: u32,
    sign_seed: u64,
    signs: Vec<f32>,
}

impl RotationSpec {
    /// Draws the sign diagonal for `round` from the shared stream, so every
    /// worker building the spec for the same round gets identical signs.
    pub fn draw(padded_len: usize, depth_used: u32, seeds: &SeedSpec, round: u64) -> Result<Self> {
        if !padded_len.is_power_of_two() {
            return Err(Error::SpecMismatch(format!(
                "length {padded_len} is not a power of two"
            )));
        }
        let mut rng = seeds.shared(SIGN_TAG, round);
        let signs = (0..padded_len)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut spec = Self::from_signs(signs, depth_used)?;
        spec.sign_seed = seeds.stream_seed(SIGN_TAG, round, None);
        Ok(spec)
    }

    pub fn from_signs(signs: Vec<f32>, depth_used: u32) -> Result<Self> {
        let len = signs.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::SpecMismatch(format!(
                "sign diagonal length {len} is not a power of two"
            )));
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::SpecMismatch("sign entries must be +1 or -1".into()));
        }
        let depth_full = len.trailing_zeros();
        if depth_used > depth_full {
            return Err(Error::out_of_range(
                "depth_used",
                depth_used,
                format!("<= {depth_full}"),
            ));
        }
        Ok(Self {
            depth_full,
            depth_used,
            sign_seed: 0,
            signs,
        })
    }

    pub fn depth_full(&self) -> u32 {
        self.depth_full
    }

    pub fn depth_used(&self) -> u32 {
        self.depth_used
    }

    pub fn block_size(&self) -> usize {
        1 << self.depth_used
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn sign_seed(&self) -> u64 {
        self.sign_seed
    }

    pub fn signs(&self) -> &[f32] {
        &self.signs
    }

    fn check(&self, v: &GradientVector) -> Result<()> {
        if v.padded_len() != self.signs.len() {
            return Err(Error::SpecMismatch(format!(
                "vector has padded length {}, spec expects {}",
                v.padded_len(),
                self.signs.len()
            )));
        }
        Ok(())
    }
}

/// First `depth` butterfly stages of the unnormalized Walsh-Hadamard
/// transform, in place.
fn butterflies(buf: &mut [f64], depth: u32) {
    for stage in 0..depth {
        let h = 1usize << stage;
        for block in buf.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
    }
}

fn scale(depth: u32) -> f64 {
    2f64.powf(-f64::from(depth) / 2.0)
}

/// Rotated vector in the padded domain. The logical length is kept for
/// bookkeeping, but the tail is generally non-zero after rotation, so the
/// result is returned as a raw buffer.
pub fn rht_forward_raw(v: &GradientVector, spec: &RotationSpec) -> Result<Vec<f32>> {
    spec.check(v)?;
    let mut buf: Vec<f64> = v
        .padded()
        .iter()
        .zip(&spec.signs)
        .map(|(&x, &s)| f64::from(x) * f64::from(s))
        .collect();
    butterflies(&mut buf, spec.depth_used);
    let k = scale(spec.depth_used);
    Ok(buf.into_iter().map(|x| (x * k) as f32).collect())
}

/// `blockdiag(H) · D · v` with orthonormal `H` of size `2^l'`.
///
/// The output is a full-length vector (`logical_len == padded_len`) because
/// rotation spreads mass into the padding coordinates.
pub fn rht_forward(v: &GradientVector, spec: &RotationSpec) -> Result<GradientVector> {
    let out = rht_forward_raw(v, spec)?;
    let len = out.len();
    GradientVector::from_padded(out, len)
}

/// Inverse of [`rht_forward_raw`]: `D · blockdiag(H) · y`.
pub fn rht_inverse_raw(rotated: &[f32], spec: &RotationSpec) -> Result<Vec<f32>> {
    if rotated.len() != spec.signs.len() {
        return Err(Error::SpecMismatch(format!(
            "buffer has length {}, spec expects {}",
            rotated.len(),
            spec.signs.len()
        )));
    }
    let mut buf: Vec<f64> = rotated.iter().map(|&x| f64::from(x)).collect();
    butterflies(&mut buf, spec.depth_used);
    let k = scale(spec.depth_used);
    Ok(buf
        .into_iter()
        .zip(&spec.signs)
        .map(|(x, &s)| (x * k * f64::from(s)) as f32)
        .collect())
}

pub fn rht_inverse(v: &GradientVector, spec: &RotationSpec) -> Result<GradientVector> {
    spec.check(v)?;
    let out = rht_inverse_raw(v.padded(), spec)?;
    let len = out.len();
    GradientVector::from_padded(out, len)
}

/// Uniform permutation of the logical coordinates drawn by Fisher-Yates
/// from the shared stream of `round`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<u32>,
}

impl Permutation {
    pub fn draw(len: usize, seeds: &SeedSpec, round: u64) -> Self {
        let mut order: Vec<u32> = (0..len as u32).collect();
        order.shuffle(&mut seeds.shared(PERM_TAG, round));
        Self { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `out[i] = v[order[i]]`.
    pub fn apply(&self, v: &[f32]) -> Vec<f32> {
        self.order.iter().map(|&j| v[j as usize]).collect()
    }

    pub fn invert(&self, permuted: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; permuted.len()];
        for (&j, &x) in self.order.iter().zip(permuted) {
            out[j as usize] = x;
        }
        out
    }
}

/// Permutes the logical coordinates of `v`; the padding stays in place.
pub fn permute(v: &GradientVector, perm: &Permutation) -> Result<GradientVector> {
    if perm.len() != v.logical_len() {
        return Err(Error::LengthMismatch {
            expected: v.logical_len(),
            actual: perm.len(),
        });
    }
    let mut out = perm.apply(v.logical());
    out.resize(v.padded_len(), 0.0);
    GradientVector::from_padded(out, v.logical_len())
}

pub fn inverse_permute(v: &GradientVector, perm: &Permutation) -> Result<GradientVector> {
    if perm.len() != v.logical_len() {
        return Err(Error::LengthMismatch {
            expected: v.logical_len(),
            actual: perm.len(),
        });
    }
    let mut out = perm.invert(v.logical());
    out.resize(v.padded_len(), 0.0);
    GradientVector::from_padded(out, v.logical_len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::vectorcore::pad_to_pow2;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(len: usize, seed: u64) -> GradientVector {
        let mut rng = SeedSpec::new(seed).shared("test-vec", 0);
        let v: Vec<f32> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        pad_to_pow2(&v).unwrap()
    }

    /// Orthonormal Hadamard matrix of size 2^k by Sylvester recursion.
    fn sylvester(k: u32) -> Vec<Vec<f64>> {
        let mut h = vec![vec![1.0]];
        for _ in 0..k {
            let n = h.len();
            let mut next = vec![vec![0.0; 2 * n]; 2 * n];
            for i in 0..n {
                for j in 0..n {
                    next[i][j] = h[i][j];
                    next[i][j + n] = h[i][j];
                    next[i + n][j] = h[i][j];
                    next[i + n][j + n] = -h[i][j];
                }
            }
            h = next;
        }
        let s = 1.0 / (h.len() as f64).sqrt();
        h.iter().map(|row| row.iter().map(|x| x * s).collect()).collect()
    }

    #[test]
    fn depth_zero_only_flips_signs() {
        let v = pad_to_pow2(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = RotationSpec::from_signs(vec![1.0, -1.0, -1.0, 1.0], 0).unwrap();
        assert_eq!(spec.block_size(), 1);
        let out = rht_forward(&v, &spec).unwrap();
        assert_eq!(out.padded(), &[1.0, -2.0, -3.0, 4.0]);
    }

    #[test]
    fn two_point_transform() {
        let v = pad_to_pow2(&[1.0, 0.0]).unwrap();
        let spec = RotationSpec::from_signs(vec![1.0, 1.0], 1).unwrap();
        let out = rht_forward(&v, &spec).unwrap();
        let r = std::f32::consts::FRAC_1_SQRT_2;
        assert!((out.padded()[0] - r).abs() < 1e-7);
        assert!((out.padded()[1] - r).abs() < 1e-7);
    }

    #[test]
    fn matches_dense_sylvester_matrix() {
        let v = gaussian(16, 9);
        let spec = RotationSpec::draw(16, 4, &SeedSpec::new(1), 0).unwrap();
        let h = sylvester(4);
        let dv: Vec<f64> = v
            .padded()
            .iter()
            .zip(spec.signs())
            .map(|(&x, &s)| f64::from(x * s))
            .collect();
        let out = rht_forward(&v, &spec).unwrap();
        for (i, row) in h.iter().enumerate() {
            let expected: f64 = row.iter().zip(&dv).map(|(a, b)| a * b).sum();
            assert!((f64::from(out.padded()[i]) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn inverse_examples() {
        let v = pad_to_pow2(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = RotationSpec::draw(4, 2, &SeedSpec::new(2), 3).unwrap();
        let back = rht_inverse(&rht_forward(&v, &spec).unwrap(), &spec).unwrap();
        for (a, b) in back.padded().iter().zip(v.padded()) {
            assert!((a - b).abs() <= 1e-6 * 4.0);
        }

        let z = GradientVector::zeros(8).unwrap();
        let spec = RotationSpec::draw(8, 3, &SeedSpec::new(2), 0).unwrap();
        assert_eq!(rht_inverse(&z, &spec).unwrap().padded(), &[0.0; 8]);

        let v = gaussian(1024, 4);
        let spec = RotationSpec::draw(1024, 6, &SeedSpec::new(2), 1).unwrap();
        let back = rht_inverse(&rht_forward(&v, &spec).unwrap(), &spec).unwrap();
        let scale = v.padded().iter().fold(0f32, |m, x| m.max(x.abs()));
        for (a, b) in back.padded().iter().zip(v.padded()) {
            assert!((a - b).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let v = gaussian(8, 1);
        let spec = RotationSpec::draw(16, 2, &SeedSpec::new(1), 0).unwrap();
        assert!(matches!(rht_forward(&v, &spec), Err(Error::SpecMismatch(_))));
        assert!(RotationSpec::from_signs(vec![1.0; 8], 4).is_err());
        assert!(RotationSpec::from_signs(vec![1.0; 6], 1).is_err());
    }

    #[test]
    fn shared_signs_identical_for_all_workers() {
        let seeds = SeedSpec::new(77);
        let a = RotationSpec::draw(256, 8, &seeds, 5).unwrap();
        let b = RotationSpec::draw(256, 8, &seeds, 5).unwrap();
        assert_eq!(a, b);
        let c = RotationSpec::draw(256, 8, &seeds, 6).unwrap();
        assert_ne!(a.signs(), c.signs());
    }

    #[test]
    fn rotation_concentrates_a_spike() {
        let mut shrunk = 0;
        for trial in 0..100 {
            let mut rng = SeedSpec::new(trial).shared("spike", 0);
            let mut v: Vec<f32> = (0..1024)
                .map(|_| {
                    let x: f32 = StandardNormal.sample(&mut rng);
                    0.1 * x
                })
                .collect();
            v[rng.random_range(0..1024)] = 50.0;
            let g = pad_to_pow2(&v).unwrap();
            let spec = RotationSpec::draw(1024, 10, &SeedSpec::new(trial + 1000), 0).unwrap();
            let r = rht_forward(&g, &spec).unwrap();
            let range = |s: &[f32]| {
                s.iter().fold(f32::MIN, |m, &x| m.max(x)) - s.iter().fold(f32::MAX, |m, &x| m.min(x))
            };
            if range(r.padded()) < range(g.padded()) {
                shrunk += 1;
            }
        }
        assert!(shrunk >= 95, "range shrank in only {shrunk}/100 trials");
    }

    #[test]
    fn permutation_examples() {
        let seeds = SeedSpec::new(8);
        let one = pad_to_pow2(&[2.5]).unwrap();
        let p = Permutation::draw(1, &seeds, 0);
        assert_eq!(permute(&one, &p).unwrap(), one);

        let v = gaussian(300, 3);
        let p = Permutation::draw(300, &seeds, 4);
        let shuffled = permute(&v, &p).unwrap();
        assert_ne!(shuffled, v);
        let back = inverse_permute(&shuffled, &p).unwrap();
        assert_eq!(back, v);

        let mut a = v.logical().to_vec();
        let mut b = shuffled.logical().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn partial_equals_blockwise_full(k in 0u32..9, extra in 0u32..3, seed in 0u64..1000) {
            let len = 1usize << (k + extra);
            let v = gaussian(len, seed);
            let spec = RotationSpec::draw(len, k, &SeedSpec::new(seed), 0).unwrap();
            let whole = rht_forward(&v, &spec).unwrap();
            let block = 1usize << k;
            for (b, (vals, signs)) in v.padded().chunks(block).zip(spec.signs().chunks(block)).enumerate() {
                let sub = GradientVector::from_padded(vals.to_vec(), block).unwrap();
                let sub_spec = RotationSpec::from_signs(signs.to_vec(), k).unwrap();
                let out = rht_forward(&sub, &sub_spec).unwrap();
                prop_assert_eq!(out.padded(), &whole.padded()[b * block..(b + 1) * block]);
            }
        }

        #[test]
        fn rotation_preserves_norm(k in 0u32..11, seed in 0u64..1000) {
            let v = gaussian(1024, seed);
            let spec = RotationSpec::draw(1024, k, &SeedSpec::new(seed), 2).unwrap();
            let r = rht_forward(&v, &spec).unwrap();
            let (a, b) = (v.sq_norm().sqrt(), r.sq_norm().sqrt());
            prop_assert!((a - b).abs() <= 1e-6 * a);
        }
    }
}
