//! Training objectives: KL, L1 change reconstruction, perceptual distance,
//! the combined pairwise loss and the WGAN-GP critic terms.
//!
//! Each objective exists twice: a graph-level `*_term` used by training
//! (generic over precision, differentiable), and a value-level function
//! over domain types.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::domain::{apply_delta, ChangeMap, Frame};
use crate::error::{Error, Result};
use crate::networks::{Bound, Critic, FeatureExtractor, GaussianParams, ModelParams};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlForm {
    /// `½(−logvar + exp(logvar) + mu²)` per dimension.
    #[default]
    AsPrinted,
    /// The closed form with the `−1` per dimension; same gradients.
    Textbook,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sigma1: f64,
    pub sigma2: f64,
    pub gp_weight: f64,
    #[serde(default)]
    pub kl_form: KlForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { sigma1: 0.01, sigma2: 0.1, gp_weight: 10.0, kl_form: KlForm::AsPrinted }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma1", self.sigma1), ("sigma2", self.sigma2), ("gp_weight", self.gp_weight)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{} must be finite and positive, got {}", name, v)));
            }
        }
        Ok(())
    }

    pub fn l1_coefficient(&self) -> f64 {
        1.0 / self.sigma1
    }

    pub fn perceptual_coefficient(&self) -> f64 {
        1.0 / (2.0 * self.sigma2 * self.sigma2)
    }
}

/// Components of the pairwise loss. `l1` and `perceptual` are unweighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseLoss {
    pub total: f64,
    pub kl: f64,
    pub l1: f64,
    pub perceptual: f64,
}

/// Graph-level pairwise loss terms, batch-averaged.
pub struct PairwiseTerms<'g, T: Real> {
    pub total: Var<'g, T>,
    pub kl: Var<'g, T>,
    pub l1: Var<'g, T>,
    pub perceptual: Var<'g, T>,
}

impl<T: Real> PairwiseTerms<'_, T> {
    pub fn values(&self) -> PairwiseLoss {
        PairwiseLoss { total: self.total.item(), kl: self.kl.item(), l1: self.l1.item(), perceptual: self.perceptual.item() }
    }
}

/// KL for `[N, D]` mu/logvar: summed over dims, averaged over the batch.
pub fn kl_term<'g, T: Real>(mu: Var<'g, T>, logvar: Var<'g, T>, form: KlForm) -> Result<Var<'g, T>> {
    let n = mu.shape()[0] as f64;
    let d = mu.shape()[1] as f64;
    let per_dim = logvar.exp().sub(logvar).add(mu.square());
    let s = per_dim.sum().scale(0.5 / n);
    Ok(match form {
        KlForm::AsPrinted => s,
        KlForm::Textbook => s.offset(-0.5 * d),
    })
}

/// Mean absolute difference.
pub fn l1_term<'g, T: Real>(delta: Var<'g, T>, delta_hat: Var<'g, T>) -> Result<Var<'g, T>> {
    if delta.shape() != delta_hat.shape() {
        return Err(Error::shape(format!("{:?}", delta.shape()), format!("{:?}", delta_hat.shape())));
    }
    Ok(delta_hat.sub(delta).abs().mean())
}

/// Mean squared feature difference, averaged over the extractor's depths.
pub fn perceptual_term<'g, T: Real>(v: &FeatureExtractor, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let g = a.graph();
    let fa = v.forward(g, a)?;
    let fb = v.forward(g, b)?;
    let layers = fa.len() as f64;
    let mut acc: Option<Var<'g, T>> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let d = x.sub(y).square().mean();
        acc = Some(match acc {
            Some(s) => s.add(d),
            None => d,
        });
    }
    Ok(acc.expect("extractor has layers").scale(1.0 / layers))
}

/// `x_prev + delta` clamped into `[0, 1]`.
pub fn apply_delta_term<'g, T: Real>(x_prev: Var<'g, T>, delta: Var<'g, T>) -> Var<'g, T> {
    x_prev.add(delta).clamp(0.0, 1.0)
}

/// Pairwise objective for `[N, 3, H, W]` changes, `[N, 3, H, W]` previous frames and `[N, D]` posterior stats.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_terms<'g, T: Real>(
    v: &FeatureExtractor,
    w: &LossWeights,
    delta: Var<'g, T>,
    delta_hat: Var<'g, T>,
    x_prev: Var<'g, T>,
    mu: Var<'g, T>,
    logvar: Var<'g, T>,
) -> Result<PairwiseTerms<'g, T>> {
    let kl = kl_term(mu, logvar, w.kl_form)?;
    let l1 = l1_term(delta, delta_hat)?;
    let perceptual = perceptual_term(v, apply_delta_term(x_prev, delta), apply_delta_term(x_prev, delta_hat))?;
    let total = kl.add(l1.scale(w.l1_coefficient())).add(perceptual.scale(w.perceptual_coefficient()));
    Ok(PairwiseTerms { total, kl, l1, perceptual })
}

/// A differentiable conditional scoring function `D(x_t, x_prev, x_final) → [N]`.
pub trait ConditionalCritic<'g, T: Real> {
    fn score(&self, x_t: Var<'g, T>, x_prev: Var<'g, T>, x_final: Var<'g, T>) -> Result<Var<'g, T>>;
}

/// The network critic with its parameters bound on a graph.
pub struct BoundCritic<'a, 'g, T: Real> {
    pub critic: &'a Critic,
    pub params: &'a Bound<'g, T>,
}

impl<'g, T: Real> ConditionalCritic<'g, T> for BoundCritic<'_, 'g, T> {
    fn score(&self, x_t: Var<'g, T>, x_prev: Var<'g, T>, x_final: Var<'g, T>) -> Result<Var<'g, T>> {
        self.critic.forward(self.params, x_t, x_prev, x_final)
    }
}

/// `mean D(fake) − mean D(real)`; the critic minimizes it.
pub fn critic_wasserstein(real_score_mean: f64, fake_score_mean: f64) -> f64 {
    fake_score_mean - real_score_mean
}

/// Graph-level penalty `weight · mean_i (‖∇_x D(x̃_i, ·)‖ − 1)²`, differentiable in the critic's parameters.
///
/// `mix` holds one `u ∈ [0, 1]` per batch item; `x̃ = u·real + (1−u)·fake`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty_term<'g, T: Real>(
    critic: &impl ConditionalCritic<'g, T>,
    graph: &'g Graph<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    x_prev: Var<'g, T>,
    x_final: Var<'g, T>,
    mix: &[f64],
    weight: f64,
) -> Result<Var<'g, T>> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(format!("{:?}", real.shape()), format!("{:?}", fake.shape())));
    }
    let n = real.dim(0);
    if mix.len() != n {
        return Err(Error::shape(format!("{} mixing weights", n), mix.len().to_string()));
    }
    let per_item = real.len() / n.max(1);
    let mut blended = real.clone();
    for (i, chunk) in blended.data_mut().chunks_mut(per_item).enumerate() {
        let u = T::lit(mix[i]);
        let f = &fake.data()[i * per_item..(i + 1) * per_item];
        for (r, &fv) in chunk.iter_mut().zip(f) {
            *r = u * *r + (T::one() - u) * fv;
        }
    }
    let x = graph.leaf(blended);
    let scores = critic.score(x, x_prev, x_final)?;
    let grad = graph.grad(scores.sum(), &[x], true)?[0];
    let norms = grad.square().sum_per_item()?.offset(NORM_EPS).sqrt();
    Ok(norms.offset(-1.0).square().mean().scale(weight))
}

pub fn kl_loss(g: &GaussianParams, form: KlForm) -> f64 {
    let s: f64 = g
        .mu()
        .iter()
        .zip(g.logvar())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (-lv + lv.exp() + m * m)
        })
        .sum();
    match form {
        KlForm::AsPrinted => s,
        KlForm::Textbook => s - 0.5 * g.dim() as f64,
    }
}

pub fn delta_l1(delta: &ChangeMap, delta_hat: &ChangeMap) -> Result<f64> {
    if delta.shape() != delta_hat.shape() {
        return Err(Error::shape(delta.shape().to_string(), delta_hat.shape().to_string()));
    }
    let n = delta.values().len() as f64;
    Ok(delta.values().iter().zip(delta_hat.values()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / n)
}

pub fn perceptual_l2(x_a: &Frame, x_b: &Frame, v: &FeatureExtractor) -> Result<f64> {
    if x_a.shape() != x_b.shape() {
        return Err(Error::shape(x_a.shape().to_string(), x_b.shape().to_string()));
    }
    let g = Graph::<f64>::inference();
    Ok(perceptual_term(v, g.constant(x_a.to_tensor()), g.constant(x_b.to_tensor()))?.item())
}

pub fn pairwise_loss(
    delta: &ChangeMap,
    delta_hat: &ChangeMap,
    x_prev: &Frame,
    g: &GaussianParams,
    v: &FeatureExtractor,
    w: &LossWeights,
) -> Result<PairwiseLoss> {
    let kl = kl_loss(g, w.kl_form);
    let l1 = delta_l1(delta, delta_hat)?;
    let perceptual = perceptual_l2(&apply_delta(x_prev, delta)?, &apply_delta(x_prev, delta_hat)?, v)?;
    let total = kl + w.l1_coefficient() * l1 + w.perceptual_coefficient() * perceptual;
    Ok(PairwiseLoss { total, kl, l1, perceptual })
}

/// Penalty for the model's critic at one interpolate, with `u` drawn from `rng`.
pub fn gradient_penalty(
    x_real: &Frame,
    x_fake: &Frame,
    x_prev: &Frame,
    x_final: &Frame,
    params: &ModelParams,
    w: &LossWeights,
    rng: &mut Stream,
) -> Result<f64> {
    for other in [x_fake, x_prev, x_final] {
        if other.shape() != x_real.shape() {
            return Err(Error::shape(x_real.shape().to_string(), other.shape().to_string()));
        }
    }
    let u: f64 = rng.random();
    let g = Graph::<f64>::new();
    let psi = crate::networks::layers::cast_params(&params.psi);
    let bound = Bound::new(&g, &psi, false);
    let critic = params.arch.critic();
    let c = BoundCritic { critic: &critic, params: &bound };
    let gp = gradient_penalty_term(
        &c,
        &g,
        &x_real.to_tensor(),
        &x_fake.to_tensor(),
        g.constant(x_prev.to_tensor()),
        g.constant(x_final.to_tensor()),
        &[u],
        w.gp_weight,
    )?;
    Ok(gp.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::Architecture;
    use crate::rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_frame(h: usize, w: usize, r: &mut Stream) -> Frame {
        Frame::new(h, w, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    fn random_tensor(shape: &[usize], r: &mut Stream, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| lo + (hi - lo) * r.random::<f64>())
    }

    /// Relative error between an analytic and a central-difference gradient.
    fn fd_check(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, analytic: &Tensor<f64>) -> f64 {
        let h = 1e-6;
        let mut num = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            num.push((f(&p) - f(&m)) / (2.0 * h));
        }
        let diff: f64 = num.iter().zip(analytic.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn kl_scalar_cases() {
        let g = GaussianParams::standard(2).unwrap();
        assert!(close(kl_loss(&g, KlForm::AsPrinted), 1.0, 1e-12));
        let g = GaussianParams::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!(close(kl_loss(&g, KlForm::AsPrinted), 1.5, 1e-12));
        let g = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        assert!(close(kl_loss(&g, KlForm::AsPrinted), 0.85914, 1e-5));
        assert!(close(kl_loss(&g, KlForm::Textbook), 0.85914 - 0.5, 1e-5));
    }

    #[test]
    fn kl_term_matches_value_form() {
        let g = Graph::<f64>::inference();
        let mu = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, -0.5]).unwrap());
        let lv = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, -1.0]).unwrap());
        let batch = kl_term(mu, lv, KlForm::AsPrinted).unwrap().item();
        let a = kl_loss(&GaussianParams::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap(), KlForm::AsPrinted);
        let b = kl_loss(&GaussianParams::new(vec![0.5, -0.5], vec![1.0, -1.0]).unwrap(), KlForm::AsPrinted);
        assert!(close(batch, 0.5 * (a + b), 1e-12));
    }

    #[test]
    fn l1_cases() {
        let z = ChangeMap::zeros(4, 4);
        let h = ChangeMap::filled(4, 4, 0.5);
        assert_eq!(delta_l1(&z, &z).unwrap(), 0.0);
        assert!(close(delta_l1(&z, &h).unwrap(), 0.5, 1e-12));
        let mut r = rng::stream(1);
        let a = ChangeMap::new(4, 4, (0..48).map(|_| r.random::<f32>() * 2.0 - 1.0).collect()).unwrap();
        assert_eq!(delta_l1(&a, &h).unwrap(), delta_l1(&h, &a).unwrap());
        assert!(delta_l1(&a, &ChangeMap::zeros(4, 5)).is_err());
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let v = FeatureExtractor::seeded(7);
        let mut r = rng::stream(2);
        let a = random_frame(12, 12, &mut r);
        let b = random_frame(12, 12, &mut r);
        assert_eq!(perceptual_l2(&a, &a, &v).unwrap(), 0.0);
        let ab = perceptual_l2(&a, &b, &v).unwrap();
        assert!(ab > 0.0);
        assert!(close(ab, perceptual_l2(&b, &a, &v).unwrap(), 1e-12));
        assert!(perceptual_l2(&a, &Frame::blank(12, 11), &v).is_err());
        assert!(perceptual_l2(&Frame::blank(3, 3), &Frame::blank(3, 3), &v).is_err());
    }

    /// Straight-line feature extraction over nested loops, independent of the tensor kernels.
    fn reference_features(frame: &Frame, v: &FeatureExtractor) -> Vec<Vec<Vec<Vec<f64>>>> {
        let (h, w) = (frame.height(), frame.width());
        let planes = (0..3).map(|c| (0..h).map(|y| (0..w).map(|x| frame.get(y, x, c) as f64).collect()).collect()).collect();
        reference_features_planes(planes, v).0
    }

    /// Features plus the smallest |pre-activation| seen at any ReLU.
    fn reference_features_planes(input: Vec<Vec<Vec<f64>>>, v: &FeatureExtractor) -> (Vec<Vec<Vec<Vec<f64>>>>, f64) {
        let mut act: Vec<Vec<Vec<f64>>> =
            input.into_iter().map(|p| p.into_iter().map(|r| r.into_iter().map(|x| 2.0 * x - 1.0).collect()).collect()).collect();
        let mut nearest_kink = f64::INFINITY;
        let p = v.params();
        let mut outs = Vec::new();
        for (i, stride) in [(1, 1usize), (2, 2), (3, 2)] {
            let wt = &p[&format!("feat.conv{}.w", i)];
            let bias = &p[&format!("feat.conv{}.b", i)];
            let (cout, cin) = (wt.shape()[0], wt.shape()[1]);
            let (ih, iw) = (act[0].len(), act[0][0].len());
            let oh = (ih + 2 - 3) / stride + 1;
            let ow = (iw + 2 - 3) / stride + 1;
            let mut out = vec![vec![vec![0.0; ow]; oh]; cout];
            for (o, plane) in out.iter_mut().enumerate() {
                for (oy, row) in plane.iter_mut().enumerate() {
                    for (ox, cell) in row.iter_mut().enumerate() {
                        let mut s = bias.data()[o];
                        for c in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= ih as isize || ix >= iw as isize {
                                        continue;
                                    }
                                    s += wt.data()[((o * cin + c) * 3 + ky) * 3 + kx] * act[c][iy as usize][ix as usize];
                                }
                            }
                        }
                        nearest_kink = nearest_kink.min(s.abs());
                        *cell = s.max(0.0);
                    }
                }
            }
            act = out.clone();
            let mut normed = out;
            for y in 0..oh {
                for x in 0..ow {
                    let n: f64 = (0..cout).map(|c| normed[c][y][x].powi(2)).sum::<f64>();
                    let d = (n + 1e-20).sqrt();
                    for plane in normed.iter_mut() {
                        plane[y][x] /= d;
                    }
                }
            }
            outs.push(normed);
        }
        (outs, nearest_kink)
    }

    fn reference_distance(a: &Frame, b: &Frame, v: &FeatureExtractor) -> f64 {
        let (fa, fb) = (reference_features(a, v), reference_features(b, v));
        let mut total = 0.0;
        for (la, lb) in fa.iter().zip(&fb) {
            let mut s = 0.0;
            let mut n = 0usize;
            for (pa, pb) in la.iter().zip(lb) {
                for (ra, rb) in pa.iter().zip(pb) {
                    for (x, y) in ra.iter().zip(rb) {
                        s += (x - y).powi(2);
                        n += 1;
                    }
                }
            }
            total += s / n as f64;
        }
        total / fa.len() as f64
    }

    #[test]
    fn perceptual_reference_pair_matches_independent_implementation() {
        let v = FeatureExtractor::seeded(crate::networks::FeatureConfig::default().seed);
        let white = Frame::blank(50, 50);
        let gray = Frame::filled(50, 50, 0.5);
        let expected = reference_distance(&white, &gray, &v);
        let got = perceptual_l2(&white, &gray, &v).unwrap();
        assert!(expected > 0.0);
        assert!(close(got, expected, 1e-9 * expected.max(1.0)), "{} vs {}", got, expected);
        let mut r = rng::stream(3);
        let (a, b) = (random_frame(9, 11, &mut r), random_frame(9, 11, &mut r));
        assert!(close(perceptual_l2(&a, &b, &v).unwrap(), reference_distance(&a, &b, &v), 1e-9));
    }

    #[test]
    fn pairwise_with_exact_reconstruction_is_pure_kl() {
        let v = FeatureExtractor::seeded(1);
        let mut r = rng::stream(4);
        let prev = random_frame(8, 8, &mut r);
        let d = ChangeMap::new(8, 8, (0..192).map(|_| r.random::<f32>() - 0.5).collect()).unwrap();
        let l = pairwise_loss(&d, &d, &prev, &GaussianParams::standard(32).unwrap(), &v, &LossWeights::default()).unwrap();
        assert_eq!(l.total, 16.0);
        assert_eq!(l.kl, 16.0);
        assert_eq!(l.l1, 0.0);
        assert_eq!(l.perceptual, 0.0);
    }

    #[test]
    fn pairwise_components_recombine_and_scale() {
        let v = FeatureExtractor::seeded(1);
        let mut r = rng::stream(5);
        for _ in 0..5 {
            let prev = random_frame(8, 8, &mut r);
            let d = ChangeMap::new(8, 8, (0..192).map(|_| r.random::<f32>() - 0.5).collect()).unwrap();
            let dh = ChangeMap::new(8, 8, (0..192).map(|_| r.random::<f32>() - 0.5).collect()).unwrap();
            let g = GaussianParams::new((0..32).map(|_| r.random::<f32>()).collect(), (0..32).map(|_| r.random::<f32>() - 0.5).collect()).unwrap();
            let w = LossWeights::default();
            let l = pairwise_loss(&d, &dh, &prev, &g, &v, &w).unwrap();
            assert!(close(l.total, l.kl + 100.0 * l.l1 + 50.0 * l.perceptual, 1e-9 * l.total.abs()));
            let w2 = LossWeights { sigma1: 0.02, ..w };
            let l2 = pairwise_loss(&d, &dh, &prev, &g, &v, &w2).unwrap();
            let weighted = |l: &PairwiseLoss, w: &LossWeights| l.total - l.kl - w.perceptual_coefficient() * l.perceptual;
            assert!(close(weighted(&l2, &w2), 0.5 * weighted(&l, &w), 1e-9 * l.total.abs()));
        }
    }

    #[test]
    fn pairwise_graph_matches_value_form() {
        let v = FeatureExtractor::seeded(1);
        let mut r = rng::stream(6);
        let prev = random_frame(8, 8, &mut r);
        let d = ChangeMap::new(8, 8, (0..192).map(|_| r.random::<f32>() - 0.5).collect()).unwrap();
        let dh = ChangeMap::new(8, 8, (0..192).map(|_| r.random::<f32>() - 0.5).collect()).unwrap();
        let gp = GaussianParams::new(vec![0.3; 4], vec![-0.2; 4]).unwrap();
        let w = LossWeights::default();
        let expected = pairwise_loss(&d, &dh, &prev, &gp, &v, &w).unwrap();
        let g = Graph::<f64>::inference();
        let mu = g.constant(Tensor::new(vec![1, 4], gp.mu().iter().map(|&x| x as f64).collect()).unwrap());
        let lv = g.constant(Tensor::new(vec![1, 4], gp.logvar().iter().map(|&x| x as f64).collect()).unwrap());
        let t = pairwise_terms(&v, &w, g.constant(d.to_tensor()), g.constant(dh.to_tensor()), g.constant(prev.to_tensor()), mu, lv)
            .unwrap()
            .values();
        assert!(close(t.total, expected.total, 1e-6 * expected.total));
        assert!(close(t.perceptual, expected.perceptual, 1e-9));
    }

    #[test]
    fn wasserstein_cases() {
        assert_eq!(critic_wasserstein(0.7, 0.7), 0.0);
        assert_eq!(critic_wasserstein(0.5, 2.0), 1.5);
        assert_eq!(critic_wasserstein(2.0, 0.5), -critic_wasserstein(0.5, 2.0));
    }

    /// `D(x) = <a, x>` with `‖a‖ = scale`.
    struct LinearCritic {
        a: Tensor<f64>,
    }

    impl<'g> ConditionalCritic<'g, f64> for LinearCritic {
        fn score(&self, x_t: Var<'g, f64>, _: Var<'g, f64>, _: Var<'g, f64>) -> Result<Var<'g, f64>> {
            let n = x_t.shape()[0];
            let a = x_t.graph().constant(self.a.clone()).broadcast_to(&x_t.shape())?;
            x_t.mul(a).sum_per_item().map(|s| s.reshape(&[n]).unwrap())
        }
    }

    struct ConstantCritic;

    impl<'g> ConditionalCritic<'g, f64> for ConstantCritic {
        fn score(&self, x_t: Var<'g, f64>, _: Var<'g, f64>, _: Var<'g, f64>) -> Result<Var<'g, f64>> {
            Ok(x_t.scale(0.0).sum_per_item()?.offset(3.0))
        }
    }

    fn gp_inputs(r: &mut Stream) -> (Tensor<f64>, Tensor<f64>) {
        (random_tensor(&[2, 3, 6, 6], r, 0.0, 1.0), random_tensor(&[2, 3, 6, 6], r, 0.0, 1.0))
    }

    #[test]
    fn penalty_vanishes_for_unit_gradient_critic() {
        let mut r = rng::stream(8);
        let mut a = random_tensor(&[1, 3, 6, 6], &mut r, -1.0, 1.0);
        let norm = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        a = a.map(|x| x / norm);
        let (real, fake) = gp_inputs(&mut r);
        let g = Graph::<f64>::new();
        let c = g.constant(real.clone());
        let p = gradient_penalty_term(&LinearCritic { a }, &g, &real, &fake, c, c, &[0.3, 0.8], 10.0).unwrap().item();
        assert!(p.abs() < 1e-9, "{}", p);
    }

    #[test]
    fn penalty_of_constant_critic_is_the_weight() {
        let mut r = rng::stream(9);
        let (real, fake) = gp_inputs(&mut r);
        let g = Graph::<f64>::new();
        let c = g.constant(real.clone());
        let p = gradient_penalty_term(&ConstantCritic, &g, &real, &fake, c, c, &[0.1, 0.9], 10.0).unwrap().item();
        assert!(close(p, 10.0, 1e-4), "{}", p);
    }

    #[test]
    fn penalty_for_network_critic_is_nonnegative_and_seeded() {
        let arch = Architecture { latent_dim: 4, widths: [4, 4, 4], critic_widths: [6, 8, 8] };
        let params = ModelParams::init(&arch, 2).unwrap();
        let mut r = rng::stream(10);
        let w = LossWeights::default();
        for _ in 0..5 {
            let f: Vec<Frame> = (0..4).map(|_| random_frame(8, 8, &mut r)).collect();
            let a = gradient_penalty(&f[0], &f[1], &f[2], &f[3], &params, &w, &mut rng::stream(1)).unwrap();
            let b = gradient_penalty(&f[0], &f[1], &f[2], &f[3], &params, &w, &mut rng::stream(1)).unwrap();
            assert!(a >= 0.0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn penalty_gradient_reaches_critic_parameters() {
        // the penalty must be differentiable in the critic weights (double backprop)
        let arch = Architecture { latent_dim: 4, widths: [4, 4, 4], critic_widths: [4, 6, 6] };
        let params = ModelParams::init(&arch, 3).unwrap();
        let psi: crate::networks::ParamMap<f64> = crate::networks::layers::cast_params(&params.psi);
        let critic = arch.critic();
        let mut r = rng::stream(11);
        let (real, fake) = (random_tensor(&[1, 3, 8, 8], &mut r, 0.0, 1.0), random_tensor(&[1, 3, 8, 8], &mut r, 0.0, 1.0));
        let prev = random_tensor(&[1, 3, 8, 8], &mut r, 0.0, 1.0);
        let eval = |psi: &crate::networks::ParamMap<f64>, train: bool| {
            let g = Graph::<f64>::new();
            let b = Bound::new(&g, psi, train);
            let c = BoundCritic { critic: &critic, params: &b };
            let pv = g.constant(prev.clone());
            let gp = gradient_penalty_term(&c, &g, &real, &fake, pv, pv, &[0.4], 10.0).unwrap();
            let grads = if train { g.grad(gp, &b.vars(), false).unwrap().iter().map(|v| (*v.value()).clone()).collect() } else { vec![] };
            (gp.item(), grads)
        };
        let (_, grads) = eval(&psi, true);
        let name = "critic.conv2.w";
        let idx = psi.keys().position(|k| k == name).unwrap();
        let analytic = grads[idx].clone();
        let f = |w: &Tensor<f64>| {
            let mut p = psi.clone();
            p.insert(name.to_string(), w.clone());
            eval(&p, false).0
        };
        let err = fd_check(&f, &psi[name], &analytic);
        assert!(err <= 1e-3, "relative error {}", err);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut r = rng::stream(12);
        for _ in 0..30 {
            let mu = random_tensor(&[2, 8], &mut r, -2.0, 2.0);
            let lv = random_tensor(&[2, 8], &mut r, -3.0, 3.0);
            let g = Graph::<f64>::new();
            let (m, l) = (g.leaf(mu.clone()), g.leaf(lv.clone()));
            let k = kl_term(m, l, KlForm::AsPrinted).unwrap();
            let grads = g.grad(k, &[m, l], false).unwrap();
            let f_mu = |x: &Tensor<f64>| {
                let g = Graph::<f64>::inference();
                kl_term(g.constant(x.clone()), g.constant(lv.clone()), KlForm::AsPrinted).unwrap().item()
            };
            let f_lv = |x: &Tensor<f64>| {
                let g = Graph::<f64>::inference();
                kl_term(g.constant(mu.clone()), g.constant(x.clone()), KlForm::AsPrinted).unwrap().item()
            };
            assert!(fd_check(&f_mu, &mu, &grads[0].value()) <= 1e-3);
            assert!(fd_check(&f_lv, &lv, &grads[1].value()) <= 1e-3);
        }
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let mut r = rng::stream(13);
        for _ in 0..30 {
            let d = random_tensor(&[1, 3, 8, 8], &mut r, -1.0, 1.0);
            // keep every residual away from the kink at zero
            let dh = Tensor::from_fn(&[1, 3, 8, 8], |i| {
                let off = 0.01 + 0.5 * r.random::<f64>();
                if r.random::<bool>() {
                    d.data()[i] + off
                } else {
                    d.data()[i] - off
                }
            });
            let g = Graph::<f64>::new();
            let x = g.leaf(dh.clone());
            let l = l1_term(g.constant(d.clone()), x).unwrap();
            let grad = g.grad(l, &[x], false).unwrap()[0].value();
            let f = |x: &Tensor<f64>| {
                let g = Graph::<f64>::inference();
                l1_term(g.constant(d.clone()), g.constant(x.clone())).unwrap().item()
            };
            assert!(fd_check(&f, &dh, &grad) <= 1e-3);
        }
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let v = FeatureExtractor::seeded(14);
        let mut r = rng::stream(14);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        while checked < 30 {
            let a = random_tensor(&[1, 3, 8, 8], &mut r, 0.0, 1.0);
            let b = random_tensor(&[1, 3, 8, 8], &mut r, 0.0, 1.0);
            // central differences are meaningless across a ReLU kink; skip inputs near one
            let planes = |t: &Tensor<f64>| (0..3).map(|c| (0..8).map(|y| (0..8).map(|x| t.data()[(c * 8 + y) * 8 + x]).collect()).collect()).collect();
            if reference_features_planes(planes(&a), &v).1 < 1e-4 {
                continue;
            }
            checked += 1;
            let g = Graph::<f64>::new();
            let x = g.leaf(a.clone());
            let p = perceptual_term(&v, x, g.constant(b.clone())).unwrap();
            let grad = g.grad(p, &[x], false).unwrap()[0].value();
            let f = |x: &Tensor<f64>| {
                let g = Graph::<f64>::inference();
                perceptual_term(&v, g.constant(x.clone()), g.constant(b.clone())).unwrap().item()
            };
            worst = worst.max(fd_check(&f, &a, &grad));
        }
        assert!(worst <= 1e-3, "worst relative error {}", worst);
    }

    #[test]
    fn critic_gradient_matches_finite_differences_over_instances() {
        let arch = Architecture { latent_dim: 4, widths: [4, 4, 4], critic_widths: [8, 12, 16] };
        let mut r = rng::stream(15);
        for i in 0..30 {
            let params = ModelParams::init(&arch, i).unwrap();
            let psi: crate::networks::ParamMap<f64> = crate::networks::layers::cast_params(&params.psi);
            let critic = arch.critic();
            let xs: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&[1, 3, 8, 8], &mut r, 0.0, 1.0)).collect();
            let g = Graph::<f64>::new();
            let b = Bound::new(&g, &psi, false);
            let x = g.leaf(xs[0].clone());
            let s = critic.forward(&b, x, g.constant(xs[1].clone()), g.constant(xs[2].clone())).unwrap().sum();
            let grad = g.grad(s, &[x], false).unwrap()[0].value();
            let f = |x: &Tensor<f64>| {
                let g = Graph::<f64>::inference();
                let b = Bound::new(&g, &psi, false);
                critic.forward(&b, g.constant(x.clone()), g.constant(xs[1].clone()), g.constant(xs[2].clone())).unwrap().item()
            };
            let err = fd_check(&f, &xs[0], &grad);
            assert!(err <= 1e-3, "instance {}: {}", i, err);
        }
    }

    #[test]
    fn minimized_iff_exact() {
        let v = FeatureExtractor::seeded(1);
        let mut r = rng::stream(16);
        let prev = random_frame(8, 8, &mut r);
        let d = ChangeMap::new(8, 8, (0..192).map(|_| r.random::<f32>() - 0.5).collect()).unwrap();
        let g = GaussianParams::standard(4).unwrap();
        let w = LossWeights::default();
        let base = pairwise_loss(&d, &d, &prev, &g, &v, &w).unwrap();
        let mut moved = d.values().to_vec();
        moved[5] += 0.1;
        let other = ChangeMap::new(8, 8, moved).unwrap();
        let l = pairwise_loss(&d, &other, &prev, &g, &v, &w).unwrap();
        assert!(l.total > base.total);
        assert!(l.l1 > 0.0);
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { sigma2: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gp_weight: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
