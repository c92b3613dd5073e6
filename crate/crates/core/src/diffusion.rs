//! Conditional denoising diffusion over beamforming vectors.
//!
//! The generative core of the crate: a noise-prediction network is trained on
//! phase-canonicalized matched-filter beams paired with probing prompts, then
//! sampled by plain ancestral reversal. Multiple candidates per prompt come
//! from derived RNG substreams, so candidate lists are nested prefixes of one
//! draw sequence and growing the candidate budget never loses a draw.
//!
//! Training mutates the model on a single driver thread. A frozen model is
//! safe to sample from concurrently; per-prompt substreams keep results
//! independent of how that work is scheduled.

use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::beamcore::{normalized_gain, Beamformer};
use crate::neuralnet::{
    read_network, write_network, Activation, DenseNet, Gradients, NetworkError, OptimizerState,
};
use crate::numerics::{CVec, RngStream};

/// Number of generated candidates used throughout the experiments.
pub const DEFAULT_CANDIDATES: usize = 5;

/// Variance schedule with precomputed products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub num_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear beta ramp from `beta_start` to `beta_end` inclusive. Panics unless
/// `0 < beta_start <= beta_end < 1` and `num_steps >= 1`.
pub fn linear_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> DiffusionSchedule {
    assert!(num_steps >= 1, "schedule needs at least one step");
    assert!(
        0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
        "beta range must satisfy 0 < start <= end < 1"
    );
    let betas: Vec<f64> = (0..num_steps)
        .map(|i| {
            if num_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_steps);
    let mut running = 1.0;
    for &a in &alphas {
        running *= a;
        alpha_bars.push(running);
    }
    DiffusionSchedule {
        num_steps,
        betas,
        alphas,
        alpha_bars,
    }
}

/// Schedule used by the experiments: 100 steps, beta 1e-4 to 0.02.
pub fn default_schedule() -> DiffusionSchedule {
    linear_schedule(100, 1e-4, 0.02)
}

/// A supervised target: the matched-filter beam with its physically
/// irrelevant global phase fixed, stored as real parts then imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamTarget {
    pub y: Vec<f64>,
}

impl BeamTarget {
    pub fn num_antennas(&self) -> usize {
        self.y.len() / 2
    }

    /// Reassemble the stacked reals into a unit-norm beamformer.
    pub fn to_beamformer(&self) -> Beamformer {
        Beamformer::new(CVec::from_stacked_reals(&self.y))
    }
}

/// Rotate `w` by the conjugate phase of its first entry, so the entry at
/// antenna 0 becomes real and nonnegative, then stack into 2N reals. Entries
/// with modulus at or below 1e-6 at antenna 0 are left unrotated.
pub fn canonicalize_phase(w: &Beamformer) -> BeamTarget {
    let weights = w.weights();
    let w0 = weights.entries()[0];
    let rotated = if w0.norm() > 1e-6 {
        weights.scale(num_complex::Complex64::from_polar(1.0, -w0.arg()))
    } else {
        weights.clone()
    };
    BeamTarget {
        y: rotated.to_stacked_reals(),
    }
}

/// `y_t = sqrt(alpha_bar_t) y0 + sqrt(1 - alpha_bar_t) eps`. Steps are
/// 1-based; out-of-range `t` panics.
pub fn forward_noising(
    schedule: &DiffusionSchedule,
    y0: &[f64],
    t: usize,
    eps: &[f64],
) -> Vec<f64> {
    assert!(
        (1..=schedule.num_steps).contains(&t),
        "diffusion step {t} outside 1..={}",
        schedule.num_steps
    );
    assert_eq!(y0.len(), eps.len(), "noise dimension mismatch");
    let abar = schedule.alpha_bars[t - 1];
    let (s0, s1) = (abar.sqrt(), (1.0 - abar).sqrt());
    y0.iter().zip(eps).map(|(a, e)| s0 * a + s1 * e).collect()
}

/// Sinusoidal embedding of the integer step index: half sines, half cosines
/// over geometrically spaced frequencies. `dim` must be even and >= 2.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut emb = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 10_000f64.powf(-exponent);
        let arg = t as f64 * freq;
        emb[i] = arg.sin();
        emb[half + i] = arg.cos();
    }
    emb
}

/// Denoiser shape knobs. Defaults match the experiments: four hidden layers
/// of 256 silu units, 32-dim time embedding, 32-dim prompt embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserArch {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub prompt_embed_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            hidden: vec![256, 256, 256, 256],
            time_embed_dim: 32,
            prompt_embed_dim: 32,
        }
    }
}

/// The conditional model: a noise-prediction network over stacked beam reals
/// plus a small prompt-embedding network trained jointly with it. A prompt
/// dimension of zero makes the model unconditional and drops the embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub schedule: DiffusionSchedule,
    pub denoiser: DenseNet,
    pub prompt_embed: Option<DenseNet>,
    pub num_antennas: usize,
    pub prompt_dim: usize,
    pub time_embed_dim: usize,
}

impl DiffusionModel {
    pub fn new(
        num_antennas: usize,
        prompt_dim: usize,
        schedule: DiffusionSchedule,
        arch: &DenoiserArch,
        rng: &mut RngStream,
    ) -> DiffusionModel {
        assert!(num_antennas >= 1, "need at least one antenna");
        assert!(!arch.hidden.is_empty(), "denoiser needs a hidden layer");
        let target_dim = 2 * num_antennas;
        let prompt_embed = if prompt_dim > 0 {
            assert!(arch.prompt_embed_dim >= 1, "prompt embedding dim must be positive");
            Some(DenseNet::new(
                &[prompt_dim, arch.prompt_embed_dim, arch.prompt_embed_dim],
                &[Activation::Silu, Activation::Identity],
                rng,
            ))
        } else {
            None
        };
        let embed_out = prompt_embed.as_ref().map_or(0, |n| n.out_dim());
        let mut dims = vec![target_dim + arch.time_embed_dim + embed_out];
        dims.extend_from_slice(&arch.hidden);
        dims.push(target_dim);
        let mut acts = vec![Activation::Silu; arch.hidden.len()];
        acts.push(Activation::Identity);
        let denoiser = DenseNet::new(&dims, &acts, rng);
        DiffusionModel {
            schedule,
            denoiser,
            prompt_embed,
            num_antennas,
            prompt_dim,
            time_embed_dim: arch.time_embed_dim,
        }
    }

    pub fn target_dim(&self) -> usize {
        2 * self.num_antennas
    }

    pub fn prompt_embed_dim(&self) -> usize {
        self.prompt_embed.as_ref().map_or(0, |n| n.out_dim())
    }

    fn assemble_input(&self, y_t: &[f64], t: usize, prompt_out: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.denoiser.in_dim());
        input.extend_from_slice(y_t);
        input.extend_from_slice(&time_embedding(t, self.time_embed_dim));
        input.extend_from_slice(prompt_out);
        input
    }

    /// Predicted noise for a noisy target at step `t` under this prompt.
    pub fn denoise(&self, y_t: &[f64], t: usize, prompt: &[f64]) -> Vec<f64> {
        assert_eq!(y_t.len(), self.target_dim(), "target dimension mismatch");
        assert_eq!(prompt.len(), self.prompt_dim, "prompt dimension mismatch");
        assert!(
            (1..=self.schedule.num_steps).contains(&t),
            "diffusion step {t} outside 1..={}",
            self.schedule.num_steps
        );
        let prompt_out = match &self.prompt_embed {
            Some(net) => net.forward(prompt),
            None => Vec::new(),
        };
        self.denoiser.forward(&self.assemble_input(y_t, t, &prompt_out))
    }
}

/// One supervised pair for training.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub prompt: Vec<f64>,
    pub target: BeamTarget,
}

/// Gradients for both networks of a model.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub denoiser: Gradients,
    pub prompt_embed: Option<Gradients>,
}

/// Items per parallel accumulation chunk. Chunk sums are folded in index
/// order, so the batch gradient is bitwise independent of thread count.
const GRAD_CHUNK: usize = 16;

/// Noise-prediction loss over one batch: per item, draw a uniform step and
/// standard Gaussian noise, noise the target forward, and score the denoiser
/// prediction by mean squared error against the drawn noise. Returns the
/// batch-mean loss and its exact gradients for both networks.
pub fn training_loss(
    model: &DiffusionModel,
    batch: &[&TrainExample],
    rng: &mut RngStream,
) -> (f64, ModelGradients) {
    assert!(!batch.is_empty(), "training batch must be nonempty");
    let dim = model.target_dim();
    // Draw all randomness up front so parallel evaluation cannot reorder it.
    let draws: Vec<(usize, Vec<f64>)> = batch
        .iter()
        .map(|item| {
            assert_eq!(item.target.y.len(), dim, "target dimension mismatch");
            assert_eq!(item.prompt.len(), model.prompt_dim, "prompt dimension mismatch");
            let t = 1 + rng.next_index(model.schedule.num_steps);
            (t, rng.standard_normal_vec(dim))
        })
        .collect();

    let num_chunks = batch.len().div_ceil(GRAD_CHUNK);
    let chunks: Vec<(f64, Gradients, Option<Gradients>)> = (0..num_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(batch.len());
            let mut loss_sum = 0.0;
            let mut gd = Gradients::zeros_like(&model.denoiser);
            let mut gp = model.prompt_embed.as_ref().map(Gradients::zeros_like);
            for i in lo..hi {
                let (t, eps) = &draws[i];
                let item = batch[i];
                let y_t = forward_noising(&model.schedule, &item.target.y, *t, eps);
                let prompt_cache = model
                    .prompt_embed
                    .as_ref()
                    .map(|net| net.forward_cached(&item.prompt));
                let prompt_out = prompt_cache.as_ref().map_or(&[][..], |c| &c.output);
                let input = model.assemble_input(&y_t, *t, prompt_out);
                let cache = model.denoiser.forward_cached(&input);
                // per-item loss: mean over dims of squared residual
                let mut grad_out = vec![0.0; dim];
                for (k, g) in grad_out.iter_mut().enumerate() {
                    let r = cache.output[k] - eps[k];
                    loss_sum += r * r / dim as f64;
                    *g = 2.0 * r / dim as f64;
                }
                let input_grad = model.denoiser.backward_accumulate(&cache, &grad_out, &mut gd);
                if let (Some(net), Some(cache_p), Some(acc)) =
                    (&model.prompt_embed, &prompt_cache, &mut gp)
                {
                    let tail = dim + model.time_embed_dim;
                    let _ = net.backward_accumulate(cache_p, &input_grad[tail..], acc);
                }
            }
            (loss_sum, gd, gp)
        })
        .collect();

    let mut loss = 0.0;
    let mut denoiser = Gradients::zeros_like(&model.denoiser);
    let mut prompt_embed = model.prompt_embed.as_ref().map(Gradients::zeros_like);
    for (l, gd, gp) in chunks {
        loss += l;
        denoiser.add_assign(&gd);
        if let (Some(acc), Some(g)) = (&mut prompt_embed, gp) {
            acc.add_assign(&g);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    denoiser.scale(inv);
    if let Some(g) = &mut prompt_embed {
        g.scale(inv);
    }
    (
        loss,
        ModelGradients {
            denoiser,
            prompt_embed,
        },
    )
}

/// Training failures: IO on the progress sink, or a non-finite loss.
#[derive(Debug)]
pub enum TrainError {
    Io(io::Error),
    Diverged { step: usize },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Io(e) => write!(f, "training progress io error: {e}"),
            TrainError::Diverged { step } => {
                write!(f, "training loss became non-finite at step {step}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<io::Error> for TrainError {
    fn from(e: io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Optimization knobs for the training driver.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step; the driver interpolates linearly from
    /// `learning_rate`. Equal values mean a constant rate.
    pub final_learning_rate: f64,
    /// Emit a progress record every this many steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_steps: 3000,
            batch_size: 128,
            learning_rate: 1e-3,
            final_learning_rate: 1e-4,
            log_every: 100,
        }
    }
}

#[derive(Serialize)]
struct ProgressRecord {
    step: usize,
    loss: f64,
    wall_ms: u64,
}

/// Train in place with adaptive-moment updates on both networks, sampling
/// each batch uniformly with replacement from `data`. Progress goes to
/// `progress` as one JSON object per line. Returns the last batch loss.
pub fn train_diffusion(
    model: &mut DiffusionModel,
    data: &[TrainExample],
    config: &TrainConfig,
    rng: &mut RngStream,
    progress: &mut impl Write,
) -> Result<f64, TrainError> {
    assert!(!data.is_empty(), "training set must be nonempty");
    assert!(config.num_steps >= 1 && config.batch_size >= 1, "empty training run");
    let mut opt_denoiser = OptimizerState::with_learning_rate(&model.denoiser, config.learning_rate);
    let mut opt_prompt = model
        .prompt_embed
        .as_ref()
        .map(|net| OptimizerState::with_learning_rate(net, config.learning_rate));
    let start = Instant::now();
    let mut last_loss = f64::NAN;
    for step in 1..=config.num_steps {
        let frac = if config.num_steps > 1 {
            (step - 1) as f64 / (config.num_steps - 1) as f64
        } else {
            0.0
        };
        let lr = config.learning_rate + frac * (config.final_learning_rate - config.learning_rate);
        opt_denoiser.learning_rate = lr;
        if let Some(opt) = &mut opt_prompt {
            opt.learning_rate = lr;
        }
        let batch: Vec<&TrainExample> = (0..config.batch_size)
            .map(|_| &data[rng.next_index(data.len())])
            .collect();
        let (loss, grads) = training_loss(model, &batch, rng);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        opt_denoiser.step(&mut model.denoiser, &grads.denoiser);
        if let (Some(net), Some(opt), Some(g)) =
            (&mut model.prompt_embed, &mut opt_prompt, &grads.prompt_embed)
        {
            opt.step(net, g);
        }
        last_loss = loss;
        if step % config.log_every == 0 || step == config.num_steps {
            let record = ProgressRecord {
                step,
                loss,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            serde_json::to_writer(&mut *progress, &record).map_err(io::Error::from)?;
            progress.write_all(b"\n")?;
        }
    }
    Ok(last_loss)
}

/// One ancestral reverse pass from pure noise, conditioned on the prompt at
/// every step, ending in a unit-norm projection. Panics, naming the step, if
/// any intermediate value is non-finite.
pub fn sample(model: &DiffusionModel, prompt: &[f64], rng: &mut RngStream) -> Beamformer {
    assert_eq!(prompt.len(), model.prompt_dim, "prompt dimension mismatch");
    let dim = model.target_dim();
    let schedule = &model.schedule;
    let mut y = rng.standard_normal_vec(dim);
    for t in (1..=schedule.num_steps).rev() {
        let eps_hat = model.denoise(&y, t, prompt);
        let beta = schedule.betas[t - 1];
        let alpha = schedule.alphas[t - 1];
        let abar = schedule.alpha_bars[t - 1];
        let shrink = beta / (1.0 - abar).sqrt();
        let scale = 1.0 / alpha.sqrt();
        if t > 1 {
            // posterior variance for a deterministic clean target
            let abar_prev = schedule.alpha_bars[t - 2];
            let sigma = ((1.0 - abar_prev) / (1.0 - abar) * beta).sqrt();
            for k in 0..dim {
                let mean = scale * (y[k] - shrink * eps_hat[k]);
                y[k] = mean + sigma * rng.next_standard_normal();
            }
        } else {
            for k in 0..dim {
                y[k] = scale * (y[k] - shrink * eps_hat[k]);
            }
        }
        assert!(
            y.iter().all(|v| v.is_finite()),
            "non-finite value at denoising step {t}"
        );
    }
    Beamformer::new(CVec::from_stacked_reals(&y))
}

/// `count` independent draws from derived substreams of `rng`. Candidate
/// lists are prefix-nested: the first k draws do not depend on `count`.
pub fn generate_candidates(
    model: &DiffusionModel,
    prompt: &[f64],
    count: usize,
    rng: &RngStream,
) -> Vec<Beamformer> {
    assert!(count >= 1, "need at least one candidate");
    (0..count)
        .map(|k| {
            let mut sub = rng.substream(k as u64);
            sample(model, prompt, &mut sub)
        })
        .collect()
}

/// Index, beam, and normalized gain of the best candidate against `h`,
/// breaking ties toward the lowest index. Models the receiver measuring each
/// candidate exactly.
pub fn select_best(candidates: &[Beamformer], h: &CVec) -> (usize, Beamformer, f64) {
    assert!(!candidates.is_empty(), "candidate list must be nonempty");
    assert!(h.l2_norm() > 0.0, "select_best: channel must be nonzero");
    let mut best = 0;
    let mut best_gain = normalized_gain(&candidates[0], h);
    for (i, w) in candidates.iter().enumerate().skip(1) {
        let g = normalized_gain(w, h);
        if g > best_gain {
            best = i;
            best_gain = g;
        }
    }
    (best, candidates[best].clone(), best_gain)
}

const MODEL_MAGIC: &[u8; 4] = b"GSDM";
const MODEL_VERSION: u16 = 1;

/// Serialize a model: a schedule block followed by the network checkpoints.
/// Exact round trip, same guarantees as the network format.
pub fn write_model(writer: &mut impl Write, model: &DiffusionModel) -> io::Result<()> {
    writer.write_all(MODEL_MAGIC)?;
    writer.write_all(&MODEL_VERSION.to_le_bytes())?;
    writer.write_all(&(model.num_antennas as u32).to_le_bytes())?;
    writer.write_all(&(model.prompt_dim as u32).to_le_bytes())?;
    writer.write_all(&(model.time_embed_dim as u32).to_le_bytes())?;
    writer.write_all(&(model.schedule.num_steps as u32).to_le_bytes())?;
    for &b in &model.schedule.betas {
        writer.write_all(&b.to_le_bytes())?;
    }
    write_network(writer, &model.denoiser)?;
    match &model.prompt_embed {
        Some(net) => {
            writer.write_all(&[1])?;
            write_network(writer, net)?;
        }
        None => writer.write_all(&[0])?,
    }
    Ok(())
}

/// Inverse of [`write_model`], with dimension-consistency validation.
pub fn read_model(reader: &mut impl Read) -> Result<DiffusionModel, NetworkError> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(NetworkError::BadMagic(magic));
    }
    let mut two = [0u8; 2];
    reader.read_exact(&mut two)?;
    let version = u16::from_le_bytes(two);
    if version != MODEL_VERSION {
        return Err(NetworkError::UnsupportedVersion(version));
    }
    let num_antennas = read_u32(reader)? as usize;
    let prompt_dim = read_u32(reader)? as usize;
    let time_embed_dim = read_u32(reader)? as usize;
    let num_steps = read_u32(reader)? as usize;
    if num_antennas == 0 || num_steps == 0 {
        return Err(NetworkError::Malformed("zero antennas or steps".into()));
    }
    let mut betas = vec![0.0; num_steps];
    for b in &mut betas {
        let mut raw = [0u8; 8];
        reader.read_exact(&mut raw)?;
        *b = f64::from_le_bytes(raw);
        if !(*b > 0.0 && *b < 1.0) {
            return Err(NetworkError::Malformed(format!("beta {b} outside (0, 1)")));
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_steps);
    let mut running = 1.0;
    for &a in &alphas {
        running *= a;
        alpha_bars.push(running);
    }
    let schedule = DiffusionSchedule {
        num_steps,
        betas,
        alphas,
        alpha_bars,
    };
    let denoiser = read_network(reader)?;
    let mut flag = [0u8; 1];
    reader.read_exact(&mut flag)?;
    let prompt_embed = match flag[0] {
        0 => None,
        1 => Some(read_network(reader)?),
        other => {
            return Err(NetworkError::Malformed(format!(
                "prompt embed flag {other}"
            )))
        }
    };
    if (prompt_dim == 0) != prompt_embed.is_none() {
        return Err(NetworkError::Malformed(
            "prompt embedder presence does not match prompt dim".into(),
        ));
    }
    if let Some(net) = &prompt_embed {
        if net.in_dim() != prompt_dim {
            return Err(NetworkError::Malformed("prompt embedder input dim".into()));
        }
    }
    let target_dim = 2 * num_antennas;
    let embed_out = prompt_embed.as_ref().map_or(0, |n| n.out_dim());
    if denoiser.out_dim() != target_dim
        || denoiser.in_dim() != target_dim + time_embed_dim + embed_out
    {
        return Err(NetworkError::Malformed("denoiser dims inconsistent".into()));
    }
    Ok(DiffusionModel {
        schedule,
        denoiser,
        prompt_embed,
        num_antennas,
        prompt_dim,
        time_embed_dim,
    })
}

fn read_u32(reader: &mut impl Read) -> Result<u32, NetworkError> {
    let mut b = [0u8; 4];
    reader.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Atomic save through a temp file and rename.
pub fn save_model(path: &Path, model: &DiffusionModel) -> Result<(), NetworkError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        write_model(&mut f, model)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DiffusionModel, NetworkError> {
    let mut f = File::open(path)?;
    read_model(&mut f)
}
