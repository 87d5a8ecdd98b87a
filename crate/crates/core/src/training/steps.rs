//! Loss-and-gradient computations for one optimizer step of each stage.
//!
//! Every function takes its random draws (latent noise, mixing weights)
//! explicitly, so the same inputs always give the same numbers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::domain::Frame;
use crate::error::{Error, Result};
use crate::losses::{
    apply_delta_term, gradient_penalty_term, l1_term, pairwise_terms, perceptual_term, BoundCritic, ConditionalCritic,
    LossWeights, PairwiseLoss,
};
use crate::networks::{Bound, FeatureExtractor, ModelParams, ParamMap};
use crate::rng::Stream;
use crate::tensor::Tensor;

use super::data::PairSample;

pub fn stack_frames(frames: &[&Frame]) -> Result<Tensor<f32>> {
    Tensor::stack_batch(&frames.iter().map(|f| f.to_tensor()).collect::<Vec<_>>())
}

/// `[n, d]` standard normal draws.
pub fn normal_noise(n: usize, d: usize, rng: &mut Stream) -> Tensor<f32> {
    Tensor::from_fn(&[n, d], |_| rng.sample::<f64, _>(StandardNormal) as f32)
}

/// A batch of transitions as `[N, 3, H, W]` tensors.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub x_prev: Tensor<f32>,
    pub delta: Tensor<f32>,
    pub x_final: Tensor<f32>,
}

impl PairBatch {
    pub fn from_samples(samples: &[PairSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty pair batch"));
        }
        Ok(PairBatch {
            x_prev: stack_frames(&samples.iter().map(|s| &s.x_prev).collect::<Vec<_>>())?,
            delta: Tensor::stack_batch(&samples.iter().map(|s| s.delta.to_tensor()).collect::<Vec<_>>())?,
            x_final: stack_frames(&samples.iter().map(|s| &s.x_final).collect::<Vec<_>>())?,
        })
    }

    pub fn len(&self) -> usize {
        self.x_prev.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients for the generator and posterior, in parameter-name order.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub theta: Vec<Tensor<f32>>,
    pub phi: Vec<Tensor<f32>>,
}

fn collect_grads<'g>(graph: &'g Graph<f32>, loss: Var<'g, f32>, theta: &Bound<'g, f32>, phi: &Bound<'g, f32>) -> Result<ModelGrads> {
    let tv = theta.vars();
    let pv = phi.vars();
    let all: Vec<Var<'g, f32>> = tv.iter().chain(pv.iter()).copied().collect();
    let grads = graph.grad(loss, &all, false)?;
    let mut values: Vec<Tensor<f32>> = grads.iter().map(|g| (*g.value()).clone()).collect();
    let phi_grads = values.split_off(tv.len());
    Ok(ModelGrads { theta: values, phi: phi_grads })
}

/// Pairwise objective with `z = mu + exp(logvar/2)·noise`, `noise: [N, D]`.
pub fn pairwise_step(
    params: &ModelParams,
    features: &FeatureExtractor,
    weights: &LossWeights,
    batch: &PairBatch,
    noise: &Tensor<f32>,
) -> Result<(PairwiseLoss, ModelGrads)> {
    let g = Graph::<f32>::new();
    let theta = Bound::new(&g, &params.theta, true);
    let phi = Bound::new(&g, &params.phi, true);
    let x_prev = g.constant(batch.x_prev.clone());
    let x_final = g.constant(batch.x_final.clone());
    let delta = g.constant(batch.delta.clone());
    let (mu, logvar) = params.arch.posterior().forward(&phi, delta, x_prev, x_final)?;
    let z = mu.add(logvar.scale(0.5).exp().mul(g.constant(noise.clone())));
    let delta_hat = params.arch.generator().forward(&theta, z, x_prev, x_final)?;
    let terms = pairwise_terms(features, weights, delta, delta_hat, x_prev, mu, logvar)?;
    let grads = collect_grads(&g, terms.total, &theta, &phi)?;
    Ok((terms.values(), grads))
}

/// Summed losses of a posterior-driven rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutLoss {
    pub total: f64,
    pub kl: f64,
    pub l1: f64,
    pub perceptual: f64,
    /// Per-step pairwise losses, step 1 first.
    pub per_step: Vec<PairwiseLoss>,
}

#[derive(Clone, Debug, Default)]
pub struct RolloutOptions<'a> {
    /// Multiplier for each step's loss (default all ones).
    pub step_weights: Option<&'a [f64]>,
    /// Cut the gradient path between steps.
    pub detach_between_steps: bool,
}

/// Posterior-driven rollout over `frames` (S tensors `[N, 3, H, W]`, real frames
/// in order) starting from the real first frame. `noise` holds S−1 `[N, D]` draws.
pub fn cvae_rollout_step(
    params: &ModelParams,
    features: &FeatureExtractor,
    weights: &LossWeights,
    frames: &[Tensor<f32>],
    x_final: &Tensor<f32>,
    noise: &[Tensor<f32>],
    opts: &RolloutOptions<'_>,
) -> Result<(RolloutLoss, ModelGrads, Vec<Tensor<f32>>)> {
    let s = frames.len();
    if s < 2 || noise.len() != s - 1 {
        return Err(Error::invalid(format!("rollout needs at least 2 frames and one noise draw per step, got {} and {}", s, noise.len())));
    }
    if let Some(w) = opts.step_weights {
        if w.len() != s - 1 {
            return Err(Error::invalid(format!("{} step weights for {} steps", w.len(), s - 1)));
        }
    }
    let g = Graph::<f32>::new();
    let theta = Bound::new(&g, &params.theta, true);
    let phi = Bound::new(&g, &params.phi, true);
    let (gen, post) = (params.arch.generator(), params.arch.posterior());
    let xf = g.constant(x_final.clone());
    let mut prev = g.constant(frames[0].clone());
    let mut total: Option<Var<'_, f32>> = None;
    let mut per_step = Vec::with_capacity(s - 1);
    let mut predicted = Vec::with_capacity(s - 1);
    for t in 1..s {
        let target = g.constant(frames[t].clone());
        let delta = target.sub(prev);
        let (mu, logvar) = post.forward(&phi, delta, prev, xf)?;
        let z = mu.add(logvar.scale(0.5).exp().mul(g.constant(noise[t - 1].clone())));
        let delta_hat = gen.forward(&theta, z, prev, xf)?;
        let terms = pairwise_terms(features, weights, delta, delta_hat, prev, mu, logvar)?;
        per_step.push(terms.values());
        let w = opts.step_weights.map_or(1.0, |w| w[t - 1]);
        let weighted = terms.total.scale(w);
        total = Some(match total {
            Some(acc) => acc.add(weighted),
            None => weighted,
        });
        let next = apply_delta_term(prev, delta_hat);
        predicted.push((*next.value()).clone());
        prev = if opts.detach_between_steps { next.detach() } else { next };
    }
    let total = total.expect("at least one step");
    let loss = RolloutLoss {
        total: total.item(),
        kl: per_step.iter().map(|p| p.kl).sum(),
        l1: per_step.iter().map(|p| p.l1).sum(),
        perceptual: per_step.iter().map(|p| p.perceptual).sum(),
        per_step,
    };
    let grads = collect_grads(&g, total, &theta, &phi)?;
    Ok((loss, grads, predicted))
}

/// Prior-driven rollout from a blank canvas without gradients: `τ + 1` frames, blank first.
pub fn sample_rollout(params: &ModelParams, x_final: &Tensor<f32>, noise: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let g = Graph::<f32>::inference();
    let theta = Bound::new(&g, &params.theta, false);
    let gen = params.arch.generator();
    let xf = g.constant(x_final.clone());
    let mut frames = vec![Tensor::full(x_final.shape(), 1.0f32)];
    for z in noise {
        let prev = g.constant(frames.last().expect("non-empty").clone());
        let delta = gen.forward(&theta, g.constant(z.clone()), prev, xf)?;
        frames.push((*apply_delta_term(prev, delta).value()).clone());
    }
    Ok(frames)
}

/// Real and generated transitions with shared context, each `[N, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct CriticBatch {
    pub real_t: Tensor<f32>,
    pub real_prev: Tensor<f32>,
    pub real_final: Tensor<f32>,
    pub fake_t: Tensor<f32>,
    pub fake_prev: Tensor<f32>,
    pub fake_final: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticLoss {
    pub total: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub real_score: f64,
    pub fake_score: f64,
    /// Largest absolute score in the batch.
    pub max_abs_score: f64,
}

/// Critic objective `mean D(fake) − mean D(real) + penalty` and its gradient in ψ.
///
/// The interpolate for item `i` mixes real and generated triples with weight `mix[i]`;
/// the penalty differentiates with respect to its current frame.
pub fn critic_step(params: &ModelParams, weights: &LossWeights, batch: &CriticBatch, mix: &[f64]) -> Result<(CriticLoss, Vec<Tensor<f32>>)> {
    let n = batch.real_t.dim(0);
    if mix.len() != n || batch.fake_t.shape() != batch.real_t.shape() {
        return Err(Error::shape(format!("{} mixing weights", n), mix.len().to_string()));
    }
    let g = Graph::<f32>::new();
    let psi = Bound::new(&g, &params.psi, true);
    let critic = params.arch.critic();
    let bc = BoundCritic { critic: &critic, params: &psi };
    let score = |a: &Tensor<f32>, b: &Tensor<f32>, f: &Tensor<f32>| bc.score(g.constant(a.clone()), g.constant(b.clone()), g.constant(f.clone()));
    let real = score(&batch.real_t, &batch.real_prev, &batch.real_final)?;
    let fake = score(&batch.fake_t, &batch.fake_prev, &batch.fake_final)?;
    let max_abs_score = real.value().data().iter().chain(fake.value().data()).fold(0.0f64, |m, &s| m.max((s as f64).abs()));
    let (real_mean, fake_mean) = (real.mean(), fake.mean());
    let wasserstein = fake_mean.sub(real_mean);
    let penalty = gradient_penalty_term(
        &bc,
        &g,
        &batch.real_t,
        &batch.fake_t,
        g.constant(blend(&batch.real_prev, &batch.fake_prev, mix)),
        g.constant(blend(&batch.real_final, &batch.fake_final, mix)),
        mix,
        weights.gp_weight,
    )?;
    let total = wasserstein.add(penalty);
    let loss = CriticLoss {
        total: total.item(),
        wasserstein: wasserstein.item(),
        penalty: penalty.item(),
        real_score: real_mean.item(),
        fake_score: fake_mean.item(),
        max_abs_score,
    };
    let grads = g.grad(total, &psi.vars(), false)?.iter().map(|v| (*v.value()).clone()).collect();
    Ok((loss, grads))
}

/// Per-item `u·real + (1−u)·fake`.
fn blend(real: &Tensor<f32>, fake: &Tensor<f32>, mix: &[f64]) -> Tensor<f32> {
    let per = real.len() / mix.len().max(1);
    let mut out = real.clone();
    for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let u = mix[i] as f32;
        for (r, &f) in chunk.iter_mut().zip(&fake.data()[i * per..(i + 1) * per]) {
            *r = u * *r + (1.0 - u) * f;
        }
    }
    out
}

/// Mean `‖∇ D‖` over the batch's interpolates, taken with respect to the current-frame input.
pub fn critic_interpolate_grad_norm(params: &ModelParams, batch: &CriticBatch, mix: &[f64]) -> Result<f64> {
    let n = batch.real_t.dim(0);
    if mix.len() != n || batch.fake_t.shape() != batch.real_t.shape() {
        return Err(Error::shape(format!("{} mixing weights", n), mix.len().to_string()));
    }
    let g = Graph::<f32>::new();
    let psi = Bound::new(&g, &params.psi, false);
    let xv = g.leaf(blend(&batch.real_t, &batch.fake_t, mix));
    let prev = g.constant(blend(&batch.real_prev, &batch.fake_prev, mix));
    let fin = g.constant(blend(&batch.real_final, &batch.fake_final, mix));
    let s = params.arch.critic().forward(&psi, xv, prev, fin)?;
    let grad = g.grad(s.sum(), &[xv], false)?[0].value();
    let per = batch.real_t.len() / n;
    let norms: f64 = grad.data().chunks(per).map(|c| c.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()).sum();
    Ok(norms / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorLoss {
    pub total: f64,
    pub adversarial: f64,
    pub final_l1: f64,
    pub final_perceptual: f64,
    /// Rollout steps (1-based) at which the image-similarity term was built.
    pub similarity_steps: Vec<usize>,
}

/// Prior-driven rollout from blank, recorded on `graph` with θ as leaves.
pub struct PriorRollout<'g> {
    /// `τ + 1` frames, blank first.
    pub frames: Vec<Var<'g, f32>>,
    theta: Bound<'g, f32>,
    x_final: Var<'g, f32>,
}

impl<'g> PriorRollout<'g> {
    pub fn run(graph: &'g Graph<f32>, params: &ModelParams, x_final: &Tensor<f32>, noise: &[Tensor<f32>]) -> Result<Self> {
        if noise.is_empty() {
            return Err(Error::invalid("sampling rollout needs at least one step"));
        }
        let theta = Bound::new(graph, &params.theta, true);
        let gen = params.arch.generator();
        let xf = graph.constant(x_final.clone());
        let mut frames = vec![graph.constant(Tensor::full(x_final.shape(), 1.0f32))];
        for z in noise {
            let prev = *frames.last().expect("non-empty");
            let delta = gen.forward(&theta, graph.constant(z.clone()), prev, xf)?;
            frames.push(apply_delta_term(prev, delta));
        }
        Ok(PriorRollout { frames, theta, x_final: xf })
    }

    pub fn frame_values(&self) -> Vec<Tensor<f32>> {
        self.frames.iter().map(|f| (*f.value()).clone()).collect()
    }

    /// Generator loss under the critic in `params.psi`, with its gradient in θ.
    ///
    /// `adversarial_weight · (−mean over steps and items of D)` plus the weighted
    /// L1 and perceptual distances between the last frame and the painting.
    pub fn generator_loss(
        self,
        params: &ModelParams,
        features: &FeatureExtractor,
        weights: &LossWeights,
        adversarial_weight: f64,
    ) -> Result<(GeneratorLoss, Vec<Tensor<f32>>)> {
        let g = self.x_final.graph();
        let psi = Bound::new(g, &params.psi, false);
        let critic = params.arch.critic();
        let xf = self.x_final;
        let tau = self.frames.len() - 1;
        let mut adv: Option<Var<'g, f32>> = None;
        let mut similarity_steps = Vec::new();
        let mut similarity = None;
        for t in 1..=tau {
            let (prev, next) = (self.frames[t - 1], self.frames[t]);
            let score = critic.forward(&psi, next, prev, xf)?.mean();
            adv = Some(match adv {
                Some(a) => a.add(score),
                None => score,
            });
            if t == tau {
                similarity_steps.push(t);
                similarity = Some((l1_term(xf, next)?, perceptual_term(features, next, xf)?));
            }
        }
        let adversarial = adv.expect("at least one step").scale(-1.0 / tau as f64);
        let (l1, perc) = similarity.expect("last step reached");
        let total = adversarial
            .scale(adversarial_weight)
            .add(l1.scale(weights.l1_coefficient()))
            .add(perc.scale(weights.perceptual_coefficient()));
        let loss = GeneratorLoss {
            total: total.item(),
            adversarial: adversarial.item(),
            final_l1: l1.item(),
            final_perceptual: perc.item(),
            similarity_steps,
        };
        let grads = g.grad(total, &self.theta.vars(), false)?.iter().map(|v| (*v.value()).clone()).collect();
        Ok((loss, grads))
    }
}

/// [`PriorRollout::run`] followed by [`PriorRollout::generator_loss`]; also returns the frames.
pub fn sampling_generator_step(
    params: &ModelParams,
    features: &FeatureExtractor,
    weights: &LossWeights,
    adversarial_weight: f64,
    x_final: &Tensor<f32>,
    noise: &[Tensor<f32>],
) -> Result<(GeneratorLoss, Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let g = Graph::<f32>::new();
    let rollout = PriorRollout::run(&g, params, x_final, noise)?;
    let frames = rollout.frame_values();
    let (loss, grads) = rollout.generator_loss(params, features, weights, adversarial_weight)?;
    Ok((loss, grads, frames))
}

/// Names of `map` in iteration order; matches the gradient order above.
pub fn param_names(map: &ParamMap<f32>) -> Vec<&str> {
    map.keys().map(String::as_str).collect()
}
