//! Generative site-specific beamforming: channel synthesis, probing-beam
//! sensing, a conditional denoising-diffusion model over beamforming weights,
//! and the evaluation harness that compares it against classical baselines.
//!
//! The pipeline mirrors a three-stage link setup flow: sweep a coarse probing
//! codebook and record RSRP (sensing), generate candidate beams conditioned on
//! that prompt (diffusion), transmit each candidate briefly and keep the best
//! (selection). Everything is deterministic given a seed.

pub mod baselines;
pub mod beamcore;
pub mod diffusion;
pub mod harness;
pub mod neuralnet;
pub mod numerics;
pub mod sensing;
pub mod sitechannel;

pub use baselines::{
    dft_sweep_beam, regress_beam, train_regressor, RegressionConfig, RegressionModel,
};
pub use beamcore::{
    apply_phase_error, beampattern, best_codebook_beam, dft_codebook, expected_phase_error_gain,
    mrt, normalized_gain, Beamformer,
};
pub use diffusion::{
    canonicalize_phase, default_schedule, forward_noising, generate_candidates, linear_schedule,
    load_model, read_model, sample, save_model, select_best, time_embedding, train_diffusion,
    training_loss, write_model, BeamTarget, DenoiserArch, DiffusionModel, DiffusionSchedule,
    ModelGradients, TrainConfig, TrainError, TrainExample, DEFAULT_CANDIDATES,
};
pub use harness::{
    checkpoint_path, desk_config, export_beampatterns, export_gain_table, parse_gain_table,
    run_experiment, run_experiment_with_threads, run_with_threads, save_checkpoints,
    thread_budget, train_diffusion_for, train_regressor_for, write_run_manifest,
    DiffusionHyperparams, ExperimentConfig, GainRecord, HarnessError, MethodId, TrainingParams,
    BEAMPATTERN_POINTS, GAIN_TABLE_HEADER,
};
pub use neuralnet::{
    load_network, read_network, save_network, write_network, Activation, DenseLayer, DenseNet,
    ForwardCache, Gradients, NetworkError, OptimizerState,
};
pub use numerics::{mix64, standard_complex_gaussian, CVec, RngStream};
pub use sensing::{
    mask_random_entry, measure_rsrp, probing_codebook, CodebookKind, ProbingCodebook,
    WirelessPrompt,
};
pub use sitechannel::{
    generate_dataset, read_dataset, synthesize_channel, write_dataset, ArrayConfig,
    ChannelDataset, ChannelSample, DatasetError, ScenarioId, SiteScenario, SplitTag,
};
