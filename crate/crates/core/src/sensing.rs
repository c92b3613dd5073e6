//! Probing-beam sensing: the compact codebook swept during stage one and the
//! normalized RSRP vector ("wireless prompt") it produces.
//!
//! Prompts are linear-power, max-normalized, so absolute path loss and any
//! complex scaling of the channel are invisible downstream.

use crate::beamcore::{dft_codebook, Beamformer};
use crate::numerics::{CVec, RngStream};
use crate::sitechannel::ArrayConfig;

/// How the probing beams are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookKind {
    /// `M` evenly spaced columns of the `N`-point DFT codebook.
    DftSubset,
    /// All `N` columns; requires `M == N`.
    FullDft,
}

/// A set of `M` unit-norm probing beams and the DFT columns they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingCodebook {
    pub beams: Vec<Beamformer>,
    pub indices: Vec<usize>,
    pub kind: CodebookKind,
}

impl ProbingCodebook {
    pub fn probe_count(&self) -> usize {
        self.beams.len()
    }
}

/// Build the probing codebook: `dft_subset` takes columns `round(i*N/M)` for
/// `i = 0..M-1` (always including broadside column 0), `full_dft` takes all
/// columns. Panics unless `1 <= M <= N` (and `M == N` for `full_dft`).
pub fn probing_codebook(array: &ArrayConfig, m: usize, kind: CodebookKind) -> ProbingCodebook {
    let n = array.num_antennas;
    assert!(
        (1..=n).contains(&m),
        "probe count {m} out of range 1..={n}"
    );
    let full = dft_codebook(n);
    let indices: Vec<usize> = match kind {
        CodebookKind::FullDft => {
            assert!(m == n, "full_dft requires M == N (got M={m}, N={n})");
            (0..n).collect()
        }
        CodebookKind::DftSubset => (0..m)
            .map(|i| ((i * n) as f64 / m as f64).round() as usize)
            .collect(),
    };
    debug_assert!(indices.iter().all(|&c| c < n));
    debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
    let beams = indices.iter().map(|&c| full[c].clone()).collect();
    ProbingCodebook {
        beams,
        indices,
        kind,
    }
}

/// Max-normalized RSRP over a probing codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct WirelessPrompt {
    /// Linear power per probe, scaled so the maximum entry is 1 (all zeros
    /// when `zero_flag` is set).
    pub rsrp: Vec<f64>,
    pub probe_count: usize,
    pub noise_db: Option<f64>,
    /// Set when every measurement was zero (e.g. a zero channel).
    pub zero_flag: bool,
    /// The pre-normalization maximum, so callers can undo the scaling.
    pub peak_power: f64,
}

/// Measure RSRP `|f_m^H h|^2` per probe, optionally add Gaussian noise of
/// power `10^(noise_db/10)` relative to the strongest probe (clamped at 0),
/// and max-normalize. A channel orthogonal to every probe (or zero) yields an
/// all-zero prompt with `zero_flag` set.
pub fn measure_rsrp(
    codebook: &ProbingCodebook,
    h: &CVec,
    noise_db: Option<f64>,
    mut rng: Option<&mut RngStream>,
) -> WirelessPrompt {
    let m = codebook.probe_count();
    for beam in &codebook.beams {
        assert_eq!(
            beam.len(),
            h.len(),
            "probing beam length {} does not match channel length {}",
            beam.len(),
            h.len()
        );
    }
    let mut raw: Vec<f64> = codebook
        .beams
        .iter()
        .map(|f| f.weights().hermitian_inner(h).norm_sqr())
        .collect();
    let clean_max = raw.iter().cloned().fold(0.0f64, f64::max);
    if let Some(db) = noise_db {
        if clean_max > 0.0 {
            let rng = rng
                .as_deref_mut()
                .expect("measuring with noise requires an rng");
            let noise_std = (clean_max * 10f64.powf(db / 10.0)).sqrt();
            for v in raw.iter_mut() {
                *v = (*v + noise_std * rng.next_standard_normal()).max(0.0);
            }
        }
    }
    let peak = raw.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return WirelessPrompt {
            rsrp: vec![0.0; m],
            probe_count: m,
            noise_db,
            zero_flag: true,
            peak_power: 0.0,
        };
    }
    WirelessPrompt {
        rsrp: raw.iter().map(|v| v / peak).collect(),
        probe_count: m,
        noise_db,
        zero_flag: false,
        peak_power: peak,
    }
}

/// Zero one uniformly chosen prompt entry and re-normalize; models a missing
/// probe report.
pub fn mask_random_entry(prompt: &WirelessPrompt, rng: &mut RngStream) -> WirelessPrompt {
    let m = prompt.probe_count;
    assert!(m >= 1, "cannot mask an empty prompt");
    let idx = rng.next_index(m);
    let mut rsrp = prompt.rsrp.clone();
    rsrp[idx] = 0.0;
    let peak = rsrp.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return WirelessPrompt {
            rsrp: vec![0.0; m],
            probe_count: m,
            noise_db: prompt.noise_db,
            zero_flag: true,
            peak_power: 0.0,
        };
    }
    WirelessPrompt {
        rsrp: rsrp.iter().map(|v| v / peak).collect(),
        probe_count: m,
        noise_db: prompt.noise_db,
        zero_flag: false,
        peak_power: prompt.peak_power * peak,
    }
}
