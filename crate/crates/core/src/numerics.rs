//! Complex vector arithmetic and seeded, splittable random streams.
//!
//! Everything stochastic in this crate draws from an [`RngStream`], a
//! value-semantic generator addressed by `(seed, stream_id)`. Substreams are
//! derived by hashing, so work fanned out across samples produces the same
//! numbers regardless of thread count or evaluation order.

use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A complex vector. Entries are finite and the length is at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CVec {
    entries: Vec<Complex64>,
}

impl CVec {
    /// Wrap a vector of complex entries.
    ///
    /// Panics if `entries` is empty or contains a non-finite component.
    pub fn new(entries: Vec<Complex64>) -> Self {
        assert!(!entries.is_empty(), "CVec requires at least one entry");
        assert!(
            entries.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
            "CVec entries must be finite"
        );
        Self { entries }
    }

    /// Build from parallel real/imaginary slices.
    pub fn from_parts(re: &[f64], im: &[f64]) -> Self {
        assert_eq!(re.len(), im.len(), "real/imag length mismatch");
        Self::new(
            re.iter()
                .zip(im)
                .map(|(&r, &i)| Complex64::new(r, i))
                .collect(),
        )
    }

    /// All-zero vector of length `n`.
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "CVec length must be >= 1");
        Self {
            entries: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Complex64> {
        self.entries.iter()
    }

    /// Hermitian inner product `sum_n conj(a_n) * b_n`.
    ///
    /// Panics on dimension mismatch.
    pub fn hermitian_inner(&self, other: &CVec) -> Complex64 {
        assert_eq!(
            self.len(),
            other.len(),
            "hermitian_inner: dimension mismatch ({} vs {})",
            self.len(),
            other.len()
        );
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Euclidean norm `sqrt(<a, a>)`.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Multiply every entry by a complex scalar.
    pub fn scale(&self, c: Complex64) -> CVec {
        CVec {
            entries: self.entries.iter().map(|z| z * c).collect(),
        }
    }

    /// Entry-wise sum. Panics on dimension mismatch.
    pub fn add(&self, other: &CVec) -> CVec {
        assert_eq!(self.len(), other.len(), "add: dimension mismatch");
        CVec {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Stack into `2n` reals: all real parts, then all imaginary parts.
    pub fn to_stacked_reals(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend(self.entries.iter().map(|z| z.re));
        out.extend(self.entries.iter().map(|z| z.im));
        out
    }

    /// Inverse of [`to_stacked_reals`]. Panics if `reals` has odd length or is empty.
    pub fn from_stacked_reals(reals: &[f64]) -> Self {
        assert!(
            reals.len() >= 2 && reals.len() % 2 == 0,
            "stacked real vector must have even length >= 2"
        );
        let n = reals.len() / 2;
        Self::new(
            (0..n)
                .map(|i| Complex64::new(reals[i], reals[n + i]))
                .collect(),
        )
    }
}

impl std::ops::Index<usize> for CVec {
    type Output = Complex64;
    fn index(&self, i: usize) -> &Complex64 {
        &self.entries[i]
    }
}

/// 64-bit avalanche mix (splitmix64 finalizer over a golden-ratio combine).
///
/// Used to derive statistically independent stream ids from a base seed.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream addressed by `(seed, stream_id)`.
///
/// The same address yields the same sample sequence on every platform.
/// Streams are value-semantic: clone freely, never share mutably.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = mix64(seed, stream_id);
        for chunk in key.chunks_exact_mut(8) {
            state = mix64(state, 0x5851_f42d_4c95_7f2d);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self {
            seed,
            stream_id,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent stream for sub-task `index`.
    ///
    /// Derivation depends only on the stream address, not on how much of this
    /// stream has been consumed, so parallel fan-out is order-independent.
    pub fn substream(&self, index: u64) -> RngStream {
        RngStream::new(self.seed, mix64(self.stream_id, index))
    }

    /// One standard normal draw.
    pub fn next_standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// `n` i.i.d. standard normal draws.
    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_standard_normal()).collect()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn next_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_index: bound must be positive");
        (self.rng.next_u64() % bound as u64) as usize
    }

    /// Deterministic Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_index(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// Uniform draw in `[0, 1)` built from the top 53 bits of one `u64`, so
    /// the value does not depend on any float-conversion policy elsewhere.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

/// `n` complex entries with unit total variance per entry: real and imaginary
/// parts are independent zero-mean Gaussians of variance 1/2.
///
/// Panics if `n == 0`.
pub fn standard_complex_gaussian(rng: &mut RngStream, n: usize) -> CVec {
    assert!(n >= 1, "standard_complex_gaussian: n must be >= 1");
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    CVec::new(
        (0..n)
            .map(|_| {
                let re = rng.next_standard_normal() * scale;
                let im = rng.next_standard_normal() * scale;
                Complex64::new(re, im)
            })
            .collect(),
    )
}
