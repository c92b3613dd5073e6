//! Comparison methods: discriminative weight regression and fixed-codebook
//! sweeping.
//!
//! The regressor maps a probing prompt straight to beam weights with a mean
//! squared error loss. That loss is minimized by the conditional mean, so
//! when one prompt is consistent with several distinct beams the output
//! collapses toward their average rather than committing to one of them.
//! The sweep baseline ignores prompts entirely and picks the best column of
//! the full DFT codebook with exhaustive feedback.

use crate::beamcore::{best_codebook_beam, dft_codebook, Beamformer};
use crate::diffusion::canonicalize_phase;
use crate::neuralnet::{
    load_network, save_network, Activation, DenseNet, Gradients, NetworkError, OptimizerState,
};
use crate::numerics::{CVec, RngStream};
use crate::sensing::{measure_rsrp, ProbingCodebook};
use crate::sitechannel::{ChannelDataset, SplitTag};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A prompt-to-weights network plus the dims it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub net: DenseNet,
    pub num_antennas: usize,
    pub prompt_dim: usize,
}

impl RegressionModel {
    /// Reuses the network checkpoint format; dims are recovered from the
    /// layer table on load.
    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        save_network(path, &self.net)
    }

    pub fn load(path: &Path) -> Result<RegressionModel, NetworkError> {
        let net = load_network(path)?;
        if net.out_dim() % 2 != 0 {
            return Err(NetworkError::Malformed("odd output dimension".into()));
        }
        Ok(RegressionModel {
            num_antennas: net.out_dim() / 2,
            prompt_dim: net.in_dim(),
            net,
        })
    }
}

/// Training knobs for the regression baseline. Defaults: three hidden relu
/// layers of 256, rate 1e-3, batch 128, up to 200 epochs with patience 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            hidden: vec![256, 256, 256],
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
        }
    }
}

/// Train a weight regressor on the dataset's train split, scoring the val
/// split after every epoch and keeping the parameters from the best epoch.
/// Stops once `patience` epochs pass without a val improvement. Prompts are
/// noiseless probe measurements with `codebook`; targets are the
/// phase-canonicalized matched-filter beams. Panics if either split is
/// empty.
pub fn train_regressor(
    dataset: &ChannelDataset,
    codebook: &ProbingCodebook,
    config: &RegressionConfig,
    rng: &mut RngStream,
) -> RegressionModel {
    assert!(!dataset.is_empty(), "dataset must be nonempty");
    let train_idx = dataset.split_indices(SplitTag::Train);
    let val_idx = dataset.split_indices(SplitTag::Val);
    assert!(!train_idx.is_empty(), "empty train split");
    assert!(!val_idx.is_empty(), "empty validation split");

    let n = dataset.array.num_antennas;
    let m = codebook.probe_count();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .samples
        .iter()
        .map(|s| {
            let prompt = measure_rsrp(codebook, &s.h, None, None);
            let target = canonicalize_phase(&crate::beamcore::mrt(&s.h));
            (prompt.rsrp, target.y)
        })
        .collect();

    let mut dims = vec![m];
    dims.extend_from_slice(&config.hidden);
    dims.push(2 * n);
    let mut acts = vec![Activation::Relu; config.hidden.len()];
    acts.push(Activation::Identity);
    let mut net = DenseNet::new(&dims, &acts, rng);
    let mut opt = OptimizerState::with_learning_rate(&net, config.learning_rate);

    let val_mse = |net: &DenseNet| {
        let mut total = 0.0;
        for &i in &val_idx {
            let (prompt, target) = &pairs[i];
            let out = net.forward(prompt);
            total += out
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / target.len() as f64;
        }
        total / val_idx.len() as f64
    };

    let mut best = val_mse(&net);
    let mut best_net = net.clone();
    let mut stale = 0usize;
    for _ in 0..config.max_epochs {
        let order = rng.permutation(train_idx.len());
        for chunk in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&net);
            for &k in chunk {
                let (prompt, target) = &pairs[train_idx[k]];
                let cache = net.forward_cached(prompt);
                let grad_out: Vec<f64> = cache
                    .output
                    .iter()
                    .zip(target)
                    .map(|(a, b)| 2.0 * (a - b) / target.len() as f64)
                    .collect();
                let _ = net.backward_accumulate(&cache, &grad_out, &mut grads);
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(&mut net, &grads);
        }
        let v = val_mse(&net);
        if v < best {
            best = v;
            best_net = net.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    RegressionModel {
        net: best_net,
        num_antennas: n,
        prompt_dim: m,
    }
}

/// Map a prompt to a unit-norm beam. Panics with "degenerate prediction" if
/// the network output is identically zero.
pub fn regress_beam(model: &RegressionModel, prompt: &[f64]) -> Beamformer {
    assert_eq!(prompt.len(), model.prompt_dim, "prompt dimension mismatch");
    let out = model.net.forward(prompt);
    let w = CVec::from_stacked_reals(&out);
    assert!(w.l2_norm() > 0.0, "degenerate prediction: all-zero weights");
    Beamformer::new(w)
}

/// Exhaustive sweep over the `n`-column DFT codebook with full feedback:
/// the highest-gain column wins. Panics on a zero channel.
pub fn dft_sweep_beam(h: &CVec, n: usize) -> Beamformer {
    assert!(h.l2_norm() > 0.0, "dft_sweep_beam: channel must be nonzero");
    best_codebook_beam(&dft_codebook(n), h).1
}
