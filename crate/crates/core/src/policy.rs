//! Diffusion action head: condition construction, epsilon-prediction
//! training and deterministic DDIM sampling of action chunks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, AdamWConfig, Graph, LrSchedule, Mlp, ParameterStore, Var};
use crate::error::{HgmError, Result};
use crate::fusion::{FusionConfig, FusionModule};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub n_points: usize,
    pub n_obs_steps: usize,
    pub horizon: usize,
    pub n_action_steps: usize,
    pub action_dim: usize,
    pub joint_dim: usize,
    /// Multiplies the global cloud, the joint state and the background
    /// spatial-stream coordinates before encoding; 10 puts metre-scale scenes
    /// in decimetres. Descriptor rows are left metric.
    pub obs_scale: f32,
    pub cloud_hidden: Vec<usize>,
    pub cloud_dim: usize,
    pub joint_hidden: Vec<usize>,
    pub joint_embed_dim: usize,
    pub denoiser_hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub num_train_timesteps: usize,
    pub num_inference_steps: usize,
    pub lr: f64,
    pub lr_warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    pub fusion: FusionConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_points: 128,
            n_obs_steps: 3,
            horizon: 8,
            n_action_steps: 4,
            action_dim: 4,
            joint_dim: 4,
            obs_scale: 10.0,
            cloud_hidden: vec![64],
            cloud_dim: 64,
            joint_hidden: vec![32],
            joint_embed_dim: 32,
            denoiser_hidden: vec![512, 512, 512],
            time_embed_dim: 32,
            num_train_timesteps: 100,
            num_inference_steps: 10,
            lr: 1e-4,
            lr_warmup_steps: 500,
            batch_size: 128,
            epochs: 3000,
            seed: 42,
            adamw: AdamWConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn condition_dim(&self) -> usize {
        self.n_obs_steps * (self.cloud_dim + self.joint_embed_dim) + self.fusion.model_dim
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HgmError::InvalidConfig(m.to_string()));
        if self.n_obs_steps == 0 || self.horizon == 0 || self.action_dim == 0 {
            return bad("n_obs_steps, horizon and action_dim must be positive");
        }
        if self.n_action_steps == 0 || self.n_action_steps > self.horizon {
            return bad("n_action_steps must lie in 1..=horizon");
        }
        if self.num_inference_steps == 0 || !self.num_train_timesteps.is_multiple_of(self.num_inference_steps) {
            return bad("num_train_timesteps must be a multiple of num_inference_steps");
        }
        if !self.time_embed_dim.is_multiple_of(2) || self.batch_size == 0 || self.n_points == 0 {
            return bad("time_embed_dim must be even; batch_size and n_points positive");
        }
        if self.fusion.heads == 0 || !self.fusion.model_dim.is_multiple_of(self.fusion.heads) {
            return Err(HgmError::HeadSplit { dim: self.fusion.model_dim, heads: self.fusion.heads });
        }
        Ok(())
    }
}

/// One observation step. Descriptor rows are `[semantics | x y z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `n_points×3` global cloud.
    pub global_cloud: Tensor,
    pub joint_state: Vec<f32>,
    pub operated_descriptors: Tensor,
    pub background_descriptors: Tensor,
}

/// `horizon×action_dim` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub data: Tensor,
}

impl ActionChunk {
    pub fn action(&self, i: usize) -> &[f32] {
        self.data.row(i)
    }
}

/// Squared-cosine ᾱ schedule over `t = 0..=T`, `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub num_train_timesteps: usize,
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub const OFFSET: f64 = 0.008;
    pub const MAX_BETA: f64 = 0.999;

    pub fn squared_cosine(t_train: usize) -> Self {
        let s = Self::OFFSET;
        let f = |t: usize| {
            let x = ((t as f64 / t_train as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=t_train).map(|t| f(t) / f0).collect();
        let mut betas = vec![0.0];
        let mut alpha_bar = vec![1.0];
        for t in 1..=t_train {
            let beta = (1.0 - raw[t] / raw[t - 1]).min(Self::MAX_BETA);
            betas.push(beta);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Self { num_train_timesteps: t_train, alpha_bar, betas }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// Decreasing inference timesteps, `T/n` apart and ending at `1`; the
    /// step after the last one lands on `t = 0`.
    pub fn inference_timesteps(&self, n: usize) -> Vec<usize> {
        let stride = self.num_train_timesteps / n.max(1);
        (0..n).rev().map(|i| 1 + i * stride).collect()
    }
}

/// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·eps`, element-wise.
pub fn add_noise(schedule: &NoiseSchedule, x0: &[f32], t: usize, eps: &[f32]) -> Vec<f32> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| (a * *x as f64 + b * *e as f64) as f32).collect()
}

/// Sinusoidal embedding of a diffusion timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[i] = s as f32;
        out[half + i] = c as f32;
    }
    out
}

/// Per-dimension min/max affine map onto `[−1, 1]`. Dimensions whose range
/// is degenerate pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl ActionStats {
    pub fn fit(actions: &Tensor) -> Result<Self> {
        if actions.rows() == 0 {
            return Err(HgmError::InvalidConfig("no actions to fit normalisation on".into()));
        }
        let a = actions.cols();
        let mut min = vec![f32::INFINITY; a];
        let mut max = vec![f32::NEG_INFINITY; a];
        for i in 0..actions.rows() {
            for (j, v) in actions.row(i).iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        Ok(Self { min, max })
    }

    fn active(&self, j: usize) -> bool {
        self.max[j] > self.min[j]
    }

    pub fn normalize(&self, chunk: &Tensor) -> Tensor {
        self.map(chunk, |v, lo, hi| 2.0 * (v as f64 - lo) / (hi - lo) - 1.0)
    }

    pub fn denormalize(&self, chunk: &Tensor) -> Tensor {
        self.map(chunk, |v, lo, hi| (v as f64 + 1.0) * 0.5 * (hi - lo) + lo)
    }

    fn map(&self, chunk: &Tensor, f: impl Fn(f32, f64, f64) -> f64) -> Tensor {
        let mut out = chunk.clone();
        let a = self.min.len();
        for row in out.data_mut().chunks_mut(a) {
            for (j, v) in row.iter_mut().enumerate() {
                if self.active(j) {
                    *v = f(*v, self.min[j] as f64, self.max[j] as f64) as f32;
                }
            }
        }
        out
    }
}

pub fn normalize_actions(chunk: &ActionChunk, stats: &ActionStats) -> ActionChunk {
    ActionChunk { data: stats.normalize(&chunk.data) }
}

pub fn denormalize_actions(chunk: &ActionChunk, stats: &ActionStats) -> ActionChunk {
    ActionChunk { data: stats.denormalize(&chunk.data) }
}

/// Network handles into the bundle's parameter store.
#[derive(Clone, Debug)]
pub struct PolicyNetwork {
    pub fusion: FusionModule,
    pub cloud_encoder: Mlp,
    pub joint_encoder: Mlp,
    pub denoiser: Mlp,
}

/// Everything needed to act: weights, schedule and normalisation.
#[derive(Clone, Debug)]
pub struct PolicyBundle {
    pub config: PolicyConfig,
    pub store: ParameterStore,
    pub network: PolicyNetwork,
    pub schedule: NoiseSchedule,
    pub stats: ActionStats,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl PolicyBundle {
    /// Freshly initialised weights; `operated_width` and `background_width`
    /// are the descriptor widths of the two objects.
    pub fn new(
        config: PolicyConfig,
        operated_width: usize,
        background_width: usize,
        stats: ActionStats,
    ) -> Result<Self> {
        config.validate()?;
        if stats.min.len() != config.action_dim || stats.max.len() != config.action_dim {
            return Err(HgmError::DimMismatch("action statistics width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let fusion = FusionModule::new(&mut store, &config.fusion, operated_width, background_width, &mut rng)?;
        let cloud_encoder = Mlp::with_activation(
            &mut store,
            "cond.cloud",
            &widths(3, &config.cloud_hidden, config.cloud_dim),
            Activation::Relu,
            &mut rng,
        )?;
        let joint_encoder = Mlp::with_activation(
            &mut store,
            "cond.joint",
            &widths(config.joint_dim, &config.joint_hidden, config.joint_embed_dim),
            Activation::Relu,
            &mut rng,
        )?;
        let denoiser_in = config.chunk_len() + config.time_embed_dim + config.condition_dim();
        let denoiser = Mlp::new(
            &mut store,
            "denoiser",
            &widths(denoiser_in, &config.denoiser_hidden, config.chunk_len()),
            &mut rng,
        )?;
        let schedule = NoiseSchedule::squared_cosine(config.num_train_timesteps);
        Ok(Self {
            config,
            store,
            network: PolicyNetwork { fusion, cloud_encoder, joint_encoder, denoiser },
            schedule,
            stats,
        })
    }

    /// Condition vectors for a batch of observation windows, `[B, cond_dim]`.
    pub fn condition_graph(&self, g: &mut Graph, windows: &[&[Observation]]) -> Result<Var> {
        let cfg = &self.config;
        let b = windows.len();
        let s = cfg.n_obs_steps;
        for w in windows {
            if w.len() != s {
                return Err(HgmError::InvalidConfig(format!(
                    "observation window has {} steps, expected {s}",
                    w.len()
                )));
            }
        }
        let steps: Vec<&Observation> = windows.iter().flat_map(|w| w.iter()).collect();
        let n_points = steps[0].global_cloud.rows();
        let mut cloud = Vec::with_capacity(b * s * n_points * 3);
        let mut joints = Vec::with_capacity(b * s * cfg.joint_dim);
        for o in &steps {
            if o.global_cloud.rows() != n_points || o.global_cloud.cols() != 3 {
                return Err(HgmError::Shape("global clouds must share one n×3 shape".into()));
            }
            if o.joint_state.len() != cfg.joint_dim {
                return Err(HgmError::DimMismatch(format!("joint state has {} entries", o.joint_state.len())));
            }
            cloud.extend_from_slice(o.global_cloud.data());
            joints.extend_from_slice(&o.joint_state);
        }
        let sc = cfg.obs_scale;
        cloud.iter_mut().for_each(|v| *v *= sc);
        joints.iter_mut().for_each(|v| *v *= sc);
        let net = &self.network;
        let cloud = g.constant(Tensor::new(vec![b * s * n_points, 3], cloud)?)?;
        let cloud = net.cloud_encoder.forward(g, &self.store, cloud)?;
        let cloud = g.segment_max(cloud, b * s)?;
        let cloud = g.reshape(cloud, &[b, s * cfg.cloud_dim])?;
        let joints = g.constant(Tensor::new(vec![b * s, cfg.joint_dim], joints)?)?;
        let joints = net.joint_encoder.forward(g, &self.store, joints)?;
        let joints = g.reshape(joints, &[b, s * cfg.joint_embed_dim])?;

        let last: Vec<&Observation> = windows.iter().map(|w| &w[s - 1]).collect();
        let op = Tensor::concat_rows(&last.iter().map(|o| &o.operated_descriptors).collect::<Vec<_>>())?;
        let bg = Tensor::concat_rows(&last.iter().map(|o| &o.background_descriptors).collect::<Vec<_>>())?;
        if op.rows() % b != 0 || bg.rows() % b != 0 {
            return Err(HgmError::Shape("descriptor token counts differ across the batch".into()));
        }
        // Descriptor tails keep metric coordinates; only the spatial stream
        // sees them rescaled.
        let bg_coords = {
            let w = bg.cols();
            let data = (0..bg.rows()).flat_map(|i| bg.row(i)[w - 3..].iter().map(|v| v * sc)).collect();
            Tensor::new(vec![bg.rows(), 3], data)?
        };
        let op = g.constant(op)?;
        let bg = g.constant(bg)?;
        let bg_coords = g.constant(bg_coords)?;
        let rel = net.fusion.relational_feature(g, &self.store, op, bg, bg_coords, b)?;
        g.concat_cols(&[cloud, joints, rel])
    }

    /// Denoiser prediction for stacked noisy chunks, timesteps and conditions.
    fn denoise_graph(&self, g: &mut Graph, x_t: Tensor, timesteps: &[usize], condition: Var) -> Result<Var> {
        let d = self.config.time_embed_dim;
        let temb: Vec<f32> = timesteps.iter().flat_map(|&t| timestep_embedding(t, d)).collect();
        let temb = g.constant(Tensor::new(vec![timesteps.len(), d], temb)?)?;
        let x = g.constant(x_t)?;
        let input = g.concat_cols(&[x, temb, condition])?;
        self.network.denoiser.forward(g, &self.store, input)
    }

    /// Noise prediction for one condition (graph-free convenience).
    pub fn predict_noise(&self, x_t: &[f32], t: usize, condition: &[f32]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(vec![1, condition.len()], condition.to_vec())?)?;
        let x = Tensor::new(vec![1, x_t.len()], x_t.to_vec())?;
        let out = self.denoise_graph(&mut g, x, &[t], c)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Condition vector for one observation window.
pub fn build_condition(window: &[Observation], bundle: &PolicyBundle) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let c = bundle.condition_graph(&mut g, &[window])?;
    Ok(g.value(c).data().to_vec())
}

/// A training example: an observation window and its normalised chunk.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub window: &'a [Observation],
    pub chunk: &'a Tensor,
}

/// One optimisation step on a batch. `step` is the zero-based update index
/// into `schedule`. Returns the loss before the update.
pub fn train_step(
    batch: &[TrainItem<'_>],
    bundle: &mut PolicyBundle,
    schedule: &LrSchedule,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let (g, loss_var) = build_loss(batch, bundle, rng)?;
    let value = g.value(loss_var).data()[0];
    if !value.is_finite() {
        return Err(HgmError::Diverged(value, step));
    }
    g.backward(loss_var, &mut bundle.store)?;
    let lr = schedule.lr_at(step + 1) as f32;
    let adamw = bundle.config.adamw;
    bundle.store.adamw_step(lr, &adamw);
    Ok(value)
}

fn build_loss(batch: &[TrainItem<'_>], bundle: &PolicyBundle, rng: &mut ChaCha8Rng) -> Result<(Graph, Var)> {
    let cfg = &bundle.config;
    let n = cfg.chunk_len();
    let t_max = cfg.num_train_timesteps;
    let mut timesteps = Vec::with_capacity(batch.len());
    let mut eps = Vec::with_capacity(batch.len() * n);
    let mut noisy = Vec::with_capacity(batch.len() * n);
    for item in batch {
        if item.chunk.len() != n {
            return Err(HgmError::Shape(format!("chunk has {} values, expected {n}", item.chunk.len())));
        }
        let t = rng.random_range(1..=t_max);
        let e: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        noisy.extend(add_noise(&bundle.schedule, item.chunk.data(), t, &e));
        eps.extend(e);
        timesteps.push(t);
    }
    let mut g = Graph::new();
    let windows: Vec<&[Observation]> = batch.iter().map(|i| i.window).collect();
    let cond = bundle.condition_graph(&mut g, &windows)?;
    let x = Tensor::new(vec![batch.len(), n], noisy)?;
    let pred = bundle.denoise_graph(&mut g, x, &timesteps, cond)?;
    let target = Tensor::new(vec![batch.len(), n], eps)?;
    // per-item squared error summed over the chunk, averaged over the batch
    let mse = g.mse(pred, &target)?;
    let loss = g.scale(mse, n as f32)?;
    Ok((g, loss))
}

/// Loss on a batch without updating weights.
pub fn evaluate_loss(batch: &[TrainItem<'_>], bundle: &PolicyBundle, rng: &mut ChaCha8Rng) -> Result<f32> {
    let (g, v) = build_loss(batch, bundle, rng)?;
    Ok(g.value(v).data()[0])
}

/// Deterministic (η = 0) DDIM over `timesteps` starting from `x_t`, with
/// `eps` supplying the noise prediction. Runs in `f64`.
pub fn ddim_loop(
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    mut x: Vec<f64>,
    mut eps: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    for (i, &t) in timesteps.iter().enumerate() {
        let prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let e = eps(&x, t)?;
        for (xv, ev) in x.iter_mut().zip(&e) {
            let x0 = (*xv - (1.0 - ab).sqrt() * ev) / ab.sqrt();
            *xv = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * ev;
        }
    }
    Ok(x)
}

/// Seeded unit-Gaussian starting point for DDIM.
pub fn initial_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Normalised sample for a condition.
pub fn ddim_sample_normalized(
    condition: &[f32],
    bundle: &PolicyBundle,
    num_inference_steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = bundle.config.chunk_len();
    let timesteps = bundle.schedule.inference_timesteps(num_inference_steps);
    ddim_loop(&bundle.schedule, &timesteps, initial_noise(n, seed), |x, t| {
        let xf: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        Ok(bundle.predict_noise(&xf, t, condition)?.into_iter().map(f64::from).collect())
    })
}

/// Action chunk in environment units.
pub fn ddim_sample(
    condition: &[f32],
    bundle: &PolicyBundle,
    num_inference_steps: usize,
    seed: u64,
) -> Result<ActionChunk> {
    let x = ddim_sample_normalized(condition, bundle, num_inference_steps, seed)?;
    let cfg = &bundle.config;
    let t = Tensor::new(vec![cfg.horizon, cfg.action_dim], x.into_iter().map(|v| v as f32).collect())?;
    Ok(ActionChunk { data: bundle.stats.denormalize(&t) })
}

/// Observation windows and normalised chunks of one demonstration segment.
#[derive(Clone, Debug)]
pub struct EpisodeSamples {
    pub observations: Vec<Observation>,
    /// `len×action_dim`, normalised.
    pub actions: Tensor,
}

impl EpisodeSamples {
    /// Window ending at `t`, padded at the start by repeating step 0.
    pub fn window(&self, t: usize, n_obs: usize) -> Vec<Observation> {
        (0..n_obs)
            .map(|k| {
                let idx = (t + k + 1).saturating_sub(n_obs);
                self.observations[idx].clone()
            })
            .collect()
    }

    /// Chunk starting at `t`, padded at the end by repeating the last action.
    pub fn chunk(&self, t: usize, horizon: usize) -> Tensor {
        let last = self.actions.rows() - 1;
        let a = self.actions.cols();
        let data = (0..horizon).flat_map(|k| self.actions.row((t + k).min(last)).to_vec()).collect();
        Tensor::new(vec![horizon, a], data).expect("horizon > 0")
    }
}

/// Everything `fit` consumes, with windows pre-assembled.
pub struct TrainingSet {
    windows: Vec<Vec<Observation>>,
    chunks: Vec<Tensor>,
}

impl TrainingSet {
    pub fn new(episodes: &[EpisodeSamples], cfg: &PolicyConfig) -> Result<Self> {
        let mut windows = Vec::new();
        let mut chunks = Vec::new();
        for ep in episodes {
            if ep.observations.len() != ep.actions.rows() {
                return Err(HgmError::Shape(format!(
                    "{} observations for {} actions",
                    ep.observations.len(),
                    ep.actions.rows()
                )));
            }
            for t in 0..ep.observations.len() {
                windows.push(ep.window(t, cfg.n_obs_steps));
                chunks.push(ep.chunk(t, cfg.horizon));
            }
        }
        Ok(Self { windows, chunks })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn item(&self, i: usize) -> TrainItem<'_> {
        TrainItem { window: &self.windows[i], chunk: &self.chunks[i] }
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        self.len().div_ceil(batch_size.max(1)) as u64
    }
}

/// One record per optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f64,
}

/// Shuffled mini-batch training for `epochs` passes. Deterministic in
/// `seed`; `on_step` sees every update.
pub fn fit(
    bundle: &mut PolicyBundle,
    data: &TrainingSet,
    epochs: usize,
    seed: u64,
    mut on_step: impl FnMut(StepLog),
) -> Result<()> {
    if data.is_empty() {
        return Err(HgmError::InvalidConfig("training set is empty".into()));
    }
    let bs = bundle.config.batch_size;
    let total = data.steps_per_epoch(bs) * epochs as u64;
    let schedule = LrSchedule::new(bundle.config.lr, bundle.config.lr_warmup_steps, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(bs) {
            let batch: Vec<TrainItem<'_>> = idx.iter().map(|&i| data.item(i)).collect();
            let loss = train_step(&batch, bundle, &schedule, step, &mut rng)?;
            on_step(StepLog { step, epoch, loss, lr: schedule.lr_at(step + 1) });
            step += 1;
        }
    }
    Ok(())
}
