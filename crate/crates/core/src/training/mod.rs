//! Optimization stages: pairwise, sequential posterior rollouts, sequential
//! prior rollouts against a critic, and the schedule alternating them.

pub mod data;
mod log;
pub mod optim;
pub mod steps;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{Architecture, FeatureConfig, FeatureExtractor, ModelParams, ParamMap};
use crate::rng::{self, Stream, StreamState};
use crate::tensor::Tensor;

pub use data::{make_pairwise_batch, starter_pair, DataConfig, PairSample, TrainData};
pub use log::{MetricRecord, MetricsLog};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use steps::{
    critic_interpolate_grad_norm, critic_step, cvae_rollout_step, pairwise_step, sample_rollout, sampling_generator_step,
    CriticBatch, CriticLoss, GeneratorLoss, PairBatch, PriorRollout, RolloutLoss, RolloutOptions,
};

pub const TRAIN_FORMAT: &str = "timelapse-train/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub arch: Architecture,
    pub features: FeatureConfig,
    pub data: DataConfig,
    /// Length of prior-driven rollouts from the blank canvas.
    pub tau: usize,
    /// Lengths of real sequences used for posterior-driven rollouts.
    pub seq_lengths: Vec<usize>,
    pub critic_iters: usize,
    pub batch_size: usize,
    pub sequence_batch_size: usize,
    pub sampling_batch_size: usize,
    pub critic_batch_size: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub betas: [f64; 2],
    pub critic_betas: [f64; 2],
    pub pairwise_steps: u64,
    /// Optimizer steps per sequential block.
    pub block_steps: u64,
    /// Total sequential blocks after the pairwise stage.
    pub sequential_blocks: u64,
    /// Consecutive (posterior-rollout, prior-rollout) blocks per cycle.
    pub alternation_ratio: [u64; 2],
    pub adversarial_weight: f64,
    pub starter_prob: f64,
    pub grad_clip: Option<f64>,
    /// Critic scores beyond this magnitude abort training.
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            arch: Architecture::default(),
            features: FeatureConfig::default(),
            data: DataConfig::default(),
            tau: 40,
            seq_lengths: vec![3, 5],
            critic_iters: 5,
            batch_size: 8,
            sequence_batch_size: 4,
            sampling_batch_size: 4,
            critic_batch_size: 16,
            learning_rate: 1e-4,
            critic_learning_rate: 1e-4,
            betas: [0.9, 0.999],
            critic_betas: [0.5, 0.9],
            pairwise_steps: 5000,
            block_steps: 200,
            sequential_blocks: 10,
            alternation_ratio: [1, 1],
            adversarial_weight: 1.0,
            starter_prob: 0.1,
            grad_clip: None,
            divergence_threshold: 1e6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.arch.validate()?;
        self.data.extraction.validate()?;
        let longest = self.seq_lengths.iter().copied().max().unwrap_or(0);
        if self.seq_lengths.is_empty() || self.seq_lengths.iter().any(|&l| l < 2) || self.tau < longest {
            return Err(Error::config(format!("need tau >= max(seq_lengths) >= 2, got tau={} seq_lengths={:?}", self.tau, self.seq_lengths)));
        }
        if self.critic_iters < 1 {
            return Err(Error::config("critic_iters must be at least 1"));
        }
        if [self.batch_size, self.sequence_batch_size, self.sampling_batch_size, self.critic_batch_size].contains(&0) {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.alternation_ratio == [0, 0] {
            return Err(Error::config("alternation_ratio must not be (0, 0)"));
        }
        if self.block_steps == 0 && self.sequential_blocks > 0 {
            return Err(Error::config("block_steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.starter_prob) {
            return Err(Error::config(format!("starter_prob {} outside [0, 1]", self.starter_prob)));
        }
        if !(self.adversarial_weight.is_finite() && self.adversarial_weight >= 0.0) {
            return Err(Error::config("adversarial_weight must be finite and non-negative"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) || !(self.divergence_threshold > 0.0) {
            return Err(Error::config("grad_clip and divergence_threshold must be positive"));
        }
        self.gen_optimizer().validate()?;
        self.critic_optimizer().validate()
    }

    pub fn gen_optimizer(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.betas[0], self.betas[1])
    }

    pub fn critic_optimizer(&self) -> AdamConfig {
        AdamConfig::new(self.critic_learning_rate, self.critic_betas[0], self.critic_betas[1])
    }

    /// Kind of sequential block number `block` (0-based) under the alternation ratio.
    pub fn block_kind(&self, block: u64) -> Stage {
        let [a, b] = self.alternation_ratio;
        if block % (a + b) < a {
            Stage::SeqCvae
        } else {
            Stage::SeqSampling
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pairwise,
    SeqCvae,
    SeqSampling,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Pairwise => "pairwise",
            Stage::SeqCvae => "seq_cvae",
            Stage::SeqSampling => "seq_sampling",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    pub global_step: u64,
    pub pairwise: u64,
    pub seq_cvae: u64,
    pub seq_sampling: u64,
    pub critic_updates: u64,
}

impl StageCounters {
    pub fn sequential(&self) -> u64 {
        self.seq_cvae + self.seq_sampling
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt_theta: Adam,
    pub opt_phi: Adam,
    pub opt_psi: Adam,
    pub counters: StageCounters,
    pub rng: StreamState,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    counters: StageCounters,
    rng: StreamState,
    optimizers: [(AdamConfig, u64); 3],
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.arch.validate()?;
        let params = ModelParams::init(&cfg.arch, cfg.seed)?;
        Ok(Self::from_params(params, cfg))
    }

    /// Fresh optimizers and counters around existing parameters.
    pub fn from_params(params: ModelParams, cfg: &TrainConfig) -> Self {
        TrainState {
            opt_theta: Adam::new(cfg.gen_optimizer(), &params.theta),
            opt_phi: Adam::new(cfg.gen_optimizer(), &params.phi),
            opt_psi: Adam::new(cfg.critic_optimizer(), &params.psi),
            counters: StageCounters::default(),
            rng: StreamState::capture(&rng::stream(rng::derive_seed(cfg.seed, 4))),
            params,
        }
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let meta = StateMeta {
            counters: self.counters,
            rng: self.rng,
            optimizers: [
                (self.opt_theta.config, self.opt_theta.step),
                (self.opt_phi.config, self.opt_phi.step),
                (self.opt_psi.config, self.opt_psi.step),
            ],
        };
        let mut c = self.params.to_container(TRAIN_FORMAT, serde_json::to_value(cfg)?, serde_json::to_value(meta)?);
        for (label, opt) in [("theta", &self.opt_theta), ("phi", &self.opt_phi), ("psi", &self.opt_psi)] {
            for (moment, map) in [("m", &opt.m), ("v", &opt.v)] {
                for (k, t) in map {
                    c.tensors.insert(format!("adam_{}_{}/{}", label, moment, k), t.clone());
                }
            }
        }
        c.write(path)
    }

    /// Loads a training checkpoint and the config it was written with.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let c = Container::read(path, TRAIN_FORMAT)?;
        let (params, cfg, extra) = ModelParams::from_container(&c, path)?;
        let cfg: TrainConfig = serde_json::from_value(cfg).map_err(|e| Error::format(path, e.to_string()))?;
        let meta: StateMeta = serde_json::from_value(extra).map_err(|e| Error::format(path, e.to_string()))?;
        let moments = |label: &str, moment: &str, like: &ParamMap<f32>| -> Result<ParamMap<f32>> {
            like.iter()
                .map(|(k, t)| {
                    let key = format!("adam_{}_{}/{}", label, moment, k);
                    match c.tensors.get(&key) {
                        Some(m) if m.shape() == t.shape() => Ok((k.clone(), m.clone())),
                        _ => Err(Error::format(path, format!("missing or misshapen optimizer array {}", key))),
                    }
                })
                .collect()
        };
        let opt = |i: usize, label: &str, like: &ParamMap<f32>| -> Result<Adam> {
            let (config, step) = meta.optimizers[i];
            Ok(Adam { config, step, m: moments(label, "m", like)?, v: moments(label, "v", like)? })
        };
        let state = TrainState {
            opt_theta: opt(0, "theta", &params.theta)?,
            opt_phi: opt(1, "phi", &params.phi)?,
            opt_psi: opt(2, "psi", &params.psi)?,
            counters: meta.counters,
            rng: meta.rng,
            params,
        };
        Ok((state, cfg))
    }
}

/// Where a training call writes its side outputs and when it stops early.
pub struct RunControl<'a> {
    pub log: &'a mut MetricsLog,
    /// Directory for stage-boundary checkpoints and divergence snapshots.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once the global step reaches this value.
    pub stop_at_step: Option<u64>,
}

impl<'a> RunControl<'a> {
    pub fn new(log: &'a mut MetricsLog) -> Self {
        RunControl { log, checkpoint_dir: None, stop_at_step: None }
    }

    fn should_stop(&self, state: &TrainState) -> bool {
        self.stop_at_step.is_some_and(|s| state.counters.global_step >= s)
    }

    fn checkpoint(&self, state: &TrainState, cfg: &TrainConfig, tag: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.checkpoint_dir else { return Ok(None) };
        crate::io::ensure_dir(dir)?;
        let path = dir.join(format!("{}_step{:08}.ckpt", tag, state.counters.global_step));
        state.save(&path, cfg)?;
        state.save(&dir.join("latest.ckpt"), cfg)?;
        Ok(Some(path))
    }

    fn diverged(&self, state: &TrainState, cfg: &TrainConfig, stage: Stage, reason: String) -> Error {
        let snapshot = self.checkpoint(state, cfg, "diverged").ok().flatten();
        Error::Diverged { stage: stage.label().into(), step: state.counters.global_step, reason, snapshot }
    }
}

/// Per-run resources derived from the config.
struct Ctx<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainData,
    features: FeatureExtractor,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a TrainData) -> Result<Self> {
        cfg.validate()?;
        Ok(Ctx { cfg, data, features: FeatureExtractor::from_config(&cfg.features)? })
    }
}

fn check_finite(values: &[(&str, f64)]) -> std::result::Result<(), String> {
    match values.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(format!("{} is {}", name, v)),
        None => Ok(()),
    }
}

fn pairwise_update(state: &mut TrainState, ctx: &Ctx<'_>, rng: &mut Stream, ctl: &mut RunControl<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let samples = ctx.data.sample_pairs(cfg.batch_size, cfg.starter_prob, rng)?;
    let batch = PairBatch::from_samples(&samples)?;
    let noise = steps::normal_noise(batch.len(), cfg.arch.latent_dim, rng);
    let (loss, grads) = pairwise_step(&state.params, &ctx.features, &cfg.weights, &batch, &noise)?;
    if let Err(reason) = check_finite(&[("pairwise loss", loss.total)]) {
        return Err(ctl.diverged(state, cfg, Stage::Pairwise, reason));
    }
    let step = state.counters.global_step;
    for (name, v) in [("total", loss.total), ("kl", loss.kl), ("l1", loss.l1), ("perceptual", loss.perceptual)] {
        ctl.log.record(step, &format!("pairwise.{}", name), v)?;
    }
    apply_model_grads(state, cfg, grads.theta, Some(grads.phi))?;
    state.counters.pairwise += 1;
    Ok(())
}

fn apply_model_grads(state: &mut TrainState, cfg: &TrainConfig, mut theta: Vec<Tensor<f32>>, phi: Option<Vec<Tensor<f32>>>) -> Result<()> {
    let n_theta = theta.len();
    if let Some(phi) = phi {
        theta.extend(phi);
        clip_global_norm(&mut theta, cfg.grad_clip);
        let phi = theta.split_off(n_theta);
        state.opt_phi.update(&mut state.params.phi, &phi)?;
    } else {
        clip_global_norm(&mut theta, cfg.grad_clip);
    }
    state.opt_theta.update(&mut state.params.theta, &theta)
}

fn cvae_update(state: &mut TrainState, ctx: &Ctx<'_>, rng: &mut Stream, ctl: &mut RunControl<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let len = cfg.seq_lengths[rng.random_range(0..cfg.seq_lengths.len())];
    let seqs = ctx.data.sample_sequences(len, cfg.sequence_batch_size, rng)?;
    let frames: Vec<Tensor<f32>> =
        (0..len).map(|t| steps::stack_frames(&seqs.iter().map(|(f, _)| &f[t]).collect::<Vec<_>>())).collect::<Result<_>>()?;
    let x_final = steps::stack_frames(&seqs.iter().map(|(_, f)| f).collect::<Vec<_>>())?;
    let noise: Vec<Tensor<f32>> = (1..len).map(|_| steps::normal_noise(seqs.len(), cfg.arch.latent_dim, rng)).collect();
    let (loss, grads, _) =
        cvae_rollout_step(&state.params, &ctx.features, &cfg.weights, &frames, &x_final, &noise, &RolloutOptions::default())?;
    if let Err(reason) = check_finite(&[("rollout loss", loss.total)]) {
        return Err(ctl.diverged(state, cfg, Stage::SeqCvae, reason));
    }
    let step = state.counters.global_step;
    for (name, v) in [("total", loss.total), ("kl", loss.kl), ("l1", loss.l1), ("perceptual", loss.perceptual), ("length", len as f64)] {
        ctl.log.record(step, &format!("seq_cvae.{}", name), v)?;
    }
    apply_model_grads(state, cfg, grads.theta, Some(grads.phi))?;
    state.counters.seq_cvae += 1;
    Ok(())
}

/// `n` generated triples drawn from a rollout (`frames[0]` blank) over batch items and steps.
fn fake_triples(frames: &[Tensor<f32>], x_final: &Tensor<f32>, n: usize, rng: &mut Stream) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let items = x_final.dim(0);
    let (mut t, mut p, mut f) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let i = rng.random_range(0..items);
        let s = rng.random_range(1..frames.len());
        t.push(frames[s].batch_item(i));
        p.push(frames[s - 1].batch_item(i));
        f.push(x_final.batch_item(i));
    }
    Ok((Tensor::stack_batch(&t)?, Tensor::stack_batch(&p)?, Tensor::stack_batch(&f)?))
}

fn critic_batch(ctx: &Ctx<'_>, frames: &[Tensor<f32>], x_final: &Tensor<f32>, rng: &mut Stream) -> Result<(CriticBatch, Vec<f64>)> {
    let n = ctx.cfg.critic_batch_size;
    let (fake_t, fake_prev, fake_final) = fake_triples(frames, x_final, n, rng)?;
    let (real_t, real_prev, real_final) = ctx.data.sample_real_triples(n, rng);
    let mix = (0..n).map(|_| rng.random::<f64>()).collect();
    Ok((CriticBatch { real_t, real_prev, real_final, fake_t, fake_prev, fake_final }, mix))
}

fn sampling_update(state: &mut TrainState, ctx: &Ctx<'_>, rng: &mut Stream, ctl: &mut RunControl<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let paintings = ctx.data.sample_paintings(cfg.sampling_batch_size, rng);
    let x_final = steps::stack_frames(&paintings.iter().collect::<Vec<_>>())?;
    let noise: Vec<Tensor<f32>> = (0..cfg.tau).map(|_| steps::normal_noise(paintings.len(), cfg.arch.latent_dim, rng)).collect();
    let graph = Graph::<f32>::new();
    let rollout = PriorRollout::run(&graph, &state.params, &x_final, &noise)?;
    let frames = rollout.frame_values();
    let step = state.counters.global_step;

    let mut last = None;
    for _ in 0..cfg.critic_iters {
        let (batch, mix) = critic_batch(ctx, &frames, &x_final, rng)?;
        let (loss, grads) = critic_step(&state.params, &cfg.weights, &batch, &mix)?;
        let bad = check_finite(&[("critic loss", loss.total)]).err().or_else(|| {
            (loss.max_abs_score > cfg.divergence_threshold).then(|| format!("critic score magnitude {} exceeds {}", loss.max_abs_score, cfg.divergence_threshold))
        });
        if let Some(reason) = bad {
            return Err(ctl.diverged(state, cfg, Stage::SeqSampling, reason));
        }
        state.opt_psi.update(&mut state.params.psi, &grads)?;
        state.counters.critic_updates += 1;
        last = Some((loss, batch, mix));
    }
    let (closs, cbatch, cmix) = last.expect("critic_iters >= 1");
    let grad_norm = critic_interpolate_grad_norm(&state.params, &cbatch, &cmix)?;

    let (gloss, grads) = rollout.generator_loss(&state.params, &ctx.features, &cfg.weights, cfg.adversarial_weight)?;
    if let Err(reason) = check_finite(&[("generator loss", gloss.total)]) {
        return Err(ctl.diverged(state, cfg, Stage::SeqSampling, reason));
    }
    for (name, v) in [
        ("critic", closs.total),
        ("wasserstein", closs.wasserstein),
        ("gp", closs.penalty),
        ("grad_norm", grad_norm),
        ("generator", gloss.total),
        ("adversarial", gloss.adversarial),
        ("final_l1", gloss.final_l1),
        ("final_perceptual", gloss.final_perceptual),
    ] {
        ctl.log.record(step, &format!("seq_sampling.{}", name), v)?;
    }
    apply_model_grads(state, cfg, grads, None)?;
    state.counters.seq_sampling += 1;
    Ok(())
}

fn run_step(state: &mut TrainState, ctx: &Ctx<'_>, stage: Stage, ctl: &mut RunControl<'_>) -> Result<()> {
    let mut rng = state.rng.restore();
    match stage {
        Stage::Pairwise => pairwise_update(state, ctx, &mut rng, ctl)?,
        Stage::SeqCvae => cvae_update(state, ctx, &mut rng, ctl)?,
        Stage::SeqSampling => sampling_update(state, ctx, &mut rng, ctl)?,
    }
    if !state.params.all_finite() {
        return Err(ctl.diverged(state, ctx.cfg, stage, "non-finite parameters after update".into()));
    }
    state.rng = StreamState::capture(&rng);
    state.counters.global_step += 1;
    Ok(())
}

fn run_steps(mut state: TrainState, ctx: &Ctx<'_>, stage: Stage, steps: u64, ctl: &mut RunControl<'_>) -> Result<TrainState> {
    let mut ran = 0;
    for _ in 0..steps {
        if ctl.should_stop(&state) {
            break;
        }
        run_step(&mut state, ctx, stage, ctl)?;
        ran += 1;
    }
    ctl.log.flush()?;
    if ran > 0 && ran == steps {
        ctl.checkpoint(&state, ctx.cfg, stage.label())?;
    }
    Ok(state)
}

/// Pairwise steps until the stage budget `cfg.pairwise_steps` is spent.
pub fn train_pairwise(state: TrainState, data: &TrainData, cfg: &TrainConfig, ctl: &mut RunControl<'_>) -> Result<TrainState> {
    let ctx = Ctx::new(cfg, data)?;
    let remaining = cfg.pairwise_steps.saturating_sub(state.counters.pairwise);
    run_steps(state, &ctx, Stage::Pairwise, remaining, ctl)
}

/// One block (`cfg.block_steps`) of posterior-driven rollout steps.
pub fn train_sequential_cvae(state: TrainState, data: &TrainData, cfg: &TrainConfig, ctl: &mut RunControl<'_>) -> Result<TrainState> {
    let ctx = Ctx::new(cfg, data)?;
    run_steps(state, &ctx, Stage::SeqCvae, cfg.block_steps, ctl)
}

/// One block (`cfg.block_steps`) of prior-driven rollout steps with critic updates.
pub fn train_sequential_sampling(state: TrainState, data: &TrainData, cfg: &TrainConfig, ctl: &mut RunControl<'_>) -> Result<TrainState> {
    let ctx = Ctx::new(cfg, data)?;
    run_steps(state, &ctx, Stage::SeqSampling, cfg.block_steps, ctl)
}

/// Stage the full schedule would run next, or `None` once the budget is spent.
pub fn next_stage(state: &TrainState, cfg: &TrainConfig) -> Option<Stage> {
    if state.counters.pairwise < cfg.pairwise_steps {
        return Some(Stage::Pairwise);
    }
    let done = state.counters.sequential();
    let block = done / cfg.block_steps.max(1);
    (block < cfg.sequential_blocks).then(|| cfg.block_kind(block))
}

/// Pairwise stage, then alternating sequential blocks, checkpointing at every boundary.
///
/// The position in the schedule is derived from the state's counters, so a
/// state saved at any step resumes where it left off.
pub fn train_full(mut state: TrainState, data: &TrainData, cfg: &TrainConfig, ctl: &mut RunControl<'_>) -> Result<TrainState> {
    let ctx = Ctx::new(cfg, data)?;
    let mut current: Option<Stage> = None;
    while let Some(stage) = next_stage(&state, cfg) {
        if ctl.should_stop(&state) {
            break;
        }
        let at_block_start = match stage {
            Stage::Pairwise => state.counters.pairwise == 0,
            _ => state.counters.sequential() % cfg.block_steps == 0,
        };
        if current.is_none() || at_block_start {
            let block = if stage == Stage::Pairwise { 0 } else { state.counters.sequential() / cfg.block_steps };
            ctl.log.record(state.counters.global_step, &format!("schedule.{}", stage.label()), block as f64)?;
        }
        current = Some(stage);
        run_step(&mut state, &ctx, stage, ctl)?;
        let boundary = match stage {
            Stage::Pairwise => state.counters.pairwise == cfg.pairwise_steps,
            _ => state.counters.sequential() % cfg.block_steps == 0,
        };
        if boundary {
            ctl.log.flush()?;
            ctl.checkpoint(&state, cfg, stage.label())?;
        }
    }
    ctl.log.flush()?;
    Ok(state)
}

/// Mean critic gradient norm at `batches` fresh real/generated interpolates.
pub fn measure_critic_grad_norm(state: &TrainState, data: &TrainData, cfg: &TrainConfig, batches: usize, seed: u64) -> Result<f64> {
    let ctx = Ctx::new(cfg, data)?;
    let mut rng = rng::stream(seed);
    let mut total = 0.0;
    for _ in 0..batches.max(1) {
        let paintings = data.sample_paintings(cfg.sampling_batch_size, &mut rng);
        let x_final = steps::stack_frames(&paintings.iter().collect::<Vec<_>>())?;
        let noise: Vec<Tensor<f32>> = (0..cfg.tau).map(|_| steps::normal_noise(paintings.len(), cfg.arch.latent_dim, &mut rng)).collect();
        let frames = sample_rollout(&state.params, &x_final, &noise)?;
        let (batch, mix) = critic_batch(&ctx, &frames, &x_final, &mut rng)?;
        total += critic_interpolate_grad_norm(&state.params, &batch, &mix)?;
    }
    Ok(total / batches.max(1) as f64)
}
