//! Beamforming weights, gain evaluation, and the DFT beam codebook.
//!
//! All gains here are normalized: for a unit-norm beam `w` and channel `h`,
//! `gain = |w^H h|^2 / ||h||^2`, so the matched filter scores exactly 1 and
//! the Cauchy-Schwarz inequality caps every other beam below it.

use num_complex::Complex64;

use crate::numerics::{CVec, RngStream};
use crate::sitechannel::ArrayConfig;

/// A transmit beam: a unit-norm complex weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    weights: CVec,
}

impl Beamformer {
    /// Normalize `weights` to unit l2 norm. Panics on a zero vector.
    pub fn new(weights: CVec) -> Self {
        let norm = weights.l2_norm();
        assert!(norm > 0.0, "beamformer weights must be nonzero");
        Self {
            weights: weights.scale(Complex64::new(1.0 / norm, 0.0)),
        }
    }

    /// Wrap weights already known to have unit norm (checked to 1e-9).
    pub fn from_unit(weights: CVec) -> Self {
        let norm = weights.l2_norm();
        assert!(
            (norm - 1.0).abs() < 1e-9,
            "weights are not unit norm (||w|| = {norm})"
        );
        Self { weights }
    }

    pub fn weights(&self) -> &CVec {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maximum ratio transmission: the matched filter `w = h / ||h||`.
pub fn mrt(h: &CVec) -> Beamformer {
    assert!(h.l2_norm() > 0.0, "mrt: channel must be nonzero");
    Beamformer::new(h.clone())
}

/// Normalized beamforming gain `|w^H h|^2 / ||h||^2`, in `[0, 1]`.
pub fn normalized_gain(w: &Beamformer, h: &CVec) -> f64 {
    let denom = h.l2_norm();
    assert!(denom > 0.0, "normalized_gain: channel must be nonzero");
    w.weights().hermitian_inner(h).norm_sqr() / (denom * denom)
}

/// The `n`-column DFT codebook: column `m` has entry
/// `exp(j 2 pi n m / N) / sqrt(N)` at antenna `n`. Columns are orthonormal
/// and, at half-wavelength spacing, match steering vectors on the uniform
/// `sin(theta)` grid with step `2/N`.
pub fn dft_codebook(n: usize) -> Vec<Beamformer> {
    assert!(n >= 2, "codebook size must be >= 2");
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|m| {
            let step = 2.0 * std::f64::consts::PI * m as f64 / n as f64;
            Beamformer::from_unit(CVec::new(
                (0..n)
                    .map(|ant| Complex64::from_polar(scale, step * ant as f64))
                    .collect(),
            ))
        })
        .collect()
}

/// Exhaustive codebook sweep; returns the best beam and its index. Ties go to
/// the lowest index.
pub fn best_codebook_beam(codebook: &[Beamformer], h: &CVec) -> (usize, Beamformer) {
    assert!(!codebook.is_empty(), "codebook must be nonempty");
    let mut best_idx = 0usize;
    let mut best_gain = f64::NEG_INFINITY;
    for (i, w) in codebook.iter().enumerate() {
        let g = normalized_gain(w, h);
        if g > best_gain {
            best_idx = i;
            best_gain = g;
        }
    }
    (best_idx, codebook[best_idx].clone())
}

/// Radiated power of `w` over `num_points` angles uniform on `[-pi/2, pi/2]`
/// inclusive: `power = |<a(theta), w>|^2 / N`, so an ideally matched beam
/// peaks at 1.
pub fn beampattern(
    array: &ArrayConfig,
    w: &Beamformer,
    num_points: usize,
) -> Vec<(f64, f64)> {
    assert!(num_points >= 2, "beampattern needs at least 2 points");
    let n = array.num_antennas as f64;
    (0..num_points)
        .map(|k| {
            let theta = -std::f64::consts::FRAC_PI_2
                + std::f64::consts::PI * k as f64 / (num_points - 1) as f64;
            let a = array.steering_vector(theta.clamp(
                -std::f64::consts::FRAC_PI_2,
                std::f64::consts::FRAC_PI_2,
            ));
            (theta, a.hermitian_inner(w.weights()).norm_sqr() / n)
        })
        .collect()
}

/// Rotate each weight entry by an independent Gaussian phase with standard
/// deviation `sigma_deg` degrees. Entry moduli are untouched, so the result
/// keeps unit norm exactly and renormalization is a no-op.
pub fn apply_phase_error(w: &Beamformer, sigma_deg: f64, rng: &mut RngStream) -> Beamformer {
    assert!(sigma_deg >= 0.0, "phase error sigma must be >= 0");
    let sigma_rad = sigma_deg.to_radians();
    let perturbed = CVec::new(
        w.weights()
            .iter()
            .map(|z| z * Complex64::from_polar(1.0, sigma_rad * rng.next_standard_normal()))
            .collect(),
    );
    Beamformer::from_unit(perturbed)
}

/// Mean normalized gain of a phase-perturbed matched filter on a
/// constant-modulus channel: `e^{-s^2} + (1 - e^{-s^2}) / N` with `s` in
/// radians. Follows from `E[e^{j d}] = e^{-s^2/2}` applied per entry.
pub fn expected_phase_error_gain(sigma_deg: f64, n: usize) -> f64 {
    let s2 = sigma_deg.to_radians().powi(2);
    let c = (-s2).exp();
    c + (1.0 - c) / n as f64
}

/// Worst-case single-path codebook gain at a half-bin angle offset:
/// `(1 / (N sin(pi / (2N))))^2`. Approaches `(2/pi)^2 ~ 0.405` for large `N`.
pub fn half_bin_scalloping_gain(n: usize) -> f64 {
    let s = (std::f64::consts::PI / (2.0 * n as f64)).sin();
    1.0 / (n as f64 * s).powi(2)
}
