//! Deterministic, label-derived random streams.
//!
//! Every source of randomness in a run is a [`RngStream`] derived from the
//! root seed and a string label (`"data.epoch3"`, `"init"`, `"eps.g.120"`,
//! ...). The same `(seed, label)` always yields the same sequence, and
//! per-step labels make checkpoint resume trivially exact: no generator state
//! needs to be carried across steps.

use alloc::vec::Vec;

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], offset: u64) -> u64 {
    let mut h = offset;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// A reproducible random stream keyed by `(root_seed, label)`.
pub struct RngStream {
    rng: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    /// Derive an independent stream. Distinct labels (or seeds) give
    /// statistically independent sequences; identical pairs give identical
    /// sequences.
    pub fn derive(root_seed: u64, label: &str) -> Self {
        let h1 = fnv1a(label.as_bytes(), FNV_OFFSET);
        let h2 = fnv1a(label.as_bytes(), FNV_OFFSET ^ 0x9e37_79b9_7f4a_7c15);
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&root_seed.to_le_bytes());
        key[8..16].copy_from_slice(&h1.to_le_bytes());
        key[16..24].copy_from_slice(&h2.to_le_bytes());
        key[24..32].copy_from_slice(&(label.len() as u64 ^ 0x5851_f42d_4c95_7f2d).to_le_bytes());
        RngStream {
            rng: ChaCha12Rng::from_seed(key),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_f32(&mut self) -> f32 {
        self.uniform() as f32
    }

    /// Unbiased draw from `{0, 1, ..., n-1}` (rejection sampling).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonempty");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller, second value cached).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn normal_f32(&mut self) -> f32 {
        self.standard_normal() as f32
    }

    pub fn fill_normal_f32(&mut self, out: &mut [f32]) {
        for v in out.iter_mut() {
            *v = self.normal_f32();
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn draws(seed: u64, label: &str, n: usize) -> Vec<u64> {
        let mut s = RngStream::derive(seed, label);
        (0..n).map(|_| s.next_u64()).collect()
    }

    #[test]
    fn same_seed_and_label_repeats() {
        assert_eq!(draws(42, "data", 64), draws(42, "data", 64));
    }

    #[test]
    fn distinct_labels_differ() {
        let a = draws(42, "data", 100);
        let b = draws(42, "init", 100);
        let equal = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        assert_eq!(equal, 0, "streams for distinct labels should not collide");
    }

    #[test]
    fn distinct_seeds_differ() {
        assert_ne!(draws(42, "x", 16), draws(43, "x", 16));
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut s = RngStream::derive(7, "normal");
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = s.standard_normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut s = RngStream::derive(3, "perm");
        let idx = s.shuffled_indices(257);
        let mut seen = alloc::vec![false; 257];
        for i in idx {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }
}
