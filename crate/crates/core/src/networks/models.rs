//! The generator `g_θ`, the posterior encoder `(μ_φ, Σ_φ)` and the conditional critic `D_ψ`.

use rand::Rng;

use super::layers::{global_mean_pool, Bound, Conv, ParamMap, LEAKY_SLOPE};
use super::Architecture;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Maps `[0, 1]` images to `[-1, 1]` network inputs.
fn centered<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    x.scale(2.0).offset(-1.0)
}

fn lrelu<'g, T: Real>(x: Result<Var<'g, T>>) -> Result<Var<'g, T>> {
    Ok(x?.leaky_relu(LEAKY_SLOPE))
}

fn spatial(v: &Var<'_, impl Real>) -> (usize, usize) {
    let s = v.shape();
    (s[2], s[3])
}

/// Four-stage strided encoder shared (structurally) by generator and posterior.
#[derive(Clone, Debug)]
struct Encoder {
    stages: [Conv; 4],
}

impl Encoder {
    fn new(prefix: &str, cin: usize, widths: [usize; 3]) -> Self {
        let [c1, c2, c3] = widths;
        Encoder {
            stages: [
                Conv::k3(format!("{}.enc1", prefix), cin, c1, 1),
                Conv::k3(format!("{}.enc2", prefix), c1, c2, 2),
                Conv::k3(format!("{}.enc3", prefix), c2, c3, 2),
                Conv::k3(format!("{}.enc4", prefix), c3, c3, 2),
            ],
        }
    }

    fn init<T: Real>(&self, params: &mut ParamMap<T>, rng: &mut impl Rng) {
        for s in &self.stages {
            s.init(params, 1.0, rng);
        }
    }

    /// Returns every stage's activation, finest first.
    fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let mut acts = Vec::with_capacity(4);
        let mut h = x;
        for s in &self.stages {
            h = lrelu(s.forward(p, h))?;
            acts.push(h);
        }
        Ok(acts)
    }
}

/// Encoder-decoder with skip connections predicting a change map in `[-1, 1]`.
///
/// `x_prev` and `x_final` enter by channel concatenation; `z` is broadcast
/// over the bottleneck grid and concatenated there.
#[derive(Clone, Debug)]
pub struct Generator {
    latent_dim: usize,
    encoder: Encoder,
    bottleneck: Conv,
    decoder: [Conv; 3],
    head: Conv,
}

impl Generator {
    pub fn new(arch: &Architecture) -> Self {
        let [c1, c2, c3] = arch.widths;
        let d = arch.latent_dim;
        Generator {
            latent_dim: d,
            encoder: Encoder::new("gen", 6, arch.widths),
            bottleneck: Conv::k3("gen.bottleneck", c3 + d, c3, 1),
            decoder: [
                Conv::k3("gen.dec3", c3 + c3, c2, 1),
                Conv::k3("gen.dec2", c2 + c2, c1, 1),
                Conv::k3("gen.dec1", c1 + c1, c1, 1),
            ],
            head: Conv::k3("gen.head", c1, 3, 1),
        }
    }

    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamMap<T> {
        let mut p = ParamMap::new();
        self.encoder.init(&mut p, rng);
        self.bottleneck.init(&mut p, 1.0, rng);
        for c in &self.decoder {
            c.init(&mut p, 1.0, rng);
        }
        // small head keeps initial changes near zero
        self.head.init(&mut p, 0.1, rng);
        p
    }

    /// `z: [N, D]`, frames `[N, 3, H, W]` → change `[N, 3, H, W]`.
    pub fn forward<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        z: Var<'g, T>,
        x_prev: Var<'g, T>,
        x_final: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let n = x_prev.shape()[0];
        if z.shape() != [n, self.latent_dim] {
            return Err(Error::shape(format!("latent [{}, {}]", n, self.latent_dim), format!("{:?}", z.shape())));
        }
        if x_prev.shape() != x_final.shape() {
            return Err(Error::shape(format!("{:?}", x_prev.shape()), format!("{:?}", x_final.shape())));
        }
        let x = Var::concat_channels(&[centered(x_prev), centered(x_final)])?;
        let skips = self.encoder.forward(p, x)?;
        let deepest = skips[3];
        let (bh, bw) = spatial(&deepest);
        let zmap = z.reshape(&[n, self.latent_dim, 1, 1])?.broadcast_to(&[n, self.latent_dim, bh, bw])?;
        let mut h = lrelu(self.bottleneck.forward(p, Var::concat_channels(&[deepest, zmap])?))?;
        for (conv, skip) in self.decoder.iter().zip([skips[2], skips[1], skips[0]]) {
            let (sh, sw) = spatial(&skip);
            let up = h.upsample(sh, sw)?;
            h = lrelu(conv.forward(p, Var::concat_channels(&[up, skip])?))?;
        }
        Ok(self.head.forward(p, h)?.tanh())
    }
}

/// Recognition network `q_φ(z | δ, x_prev, x_final)`.
#[derive(Clone, Debug)]
pub struct PosteriorEncoder {
    latent_dim: usize,
    encoder: Encoder,
    head: Conv,
}

impl PosteriorEncoder {
    pub fn new(arch: &Architecture) -> Self {
        PosteriorEncoder {
            latent_dim: arch.latent_dim,
            encoder: Encoder::new("post", 9, arch.widths),
            head: Conv::k1("post.head", arch.widths[2], 2 * arch.latent_dim),
        }
    }

    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamMap<T> {
        let mut p = ParamMap::new();
        self.encoder.init(&mut p, rng);
        self.head.init(&mut p, 0.1, rng);
        p
    }

    /// Returns `(mu, logvar)`, each `[N, D]`; logvar is clamped to `[-10, 10]`.
    pub fn forward<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        delta: Var<'g, T>,
        x_prev: Var<'g, T>,
        x_final: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let n = x_prev.shape()[0];
        if delta.shape() != x_prev.shape() || x_prev.shape() != x_final.shape() {
            return Err(Error::shape(format!("{:?}", x_prev.shape()), format!("{:?} / {:?}", delta.shape(), x_final.shape())));
        }
        let x = Var::concat_channels(&[delta, centered(x_prev), centered(x_final)])?;
        let acts = self.encoder.forward(p, x)?;
        let pooled = global_mean_pool(acts[3])?;
        let stats = self.head.forward(p, pooled)?.reshape(&[n, 2 * self.latent_dim])?;
        let mu = stats.slice_channels(0, self.latent_dim)?;
        let logvar = stats.slice_channels(self.latent_dim, self.latent_dim)?.clamp(LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, logvar))
    }
}

/// Conditional critic: strided convolutions, no normalization, mean-pooled to one score.
#[derive(Clone, Debug)]
pub struct Critic {
    stages: [Conv; 3],
    head: Conv,
}

impl Critic {
    pub fn new(arch: &Architecture) -> Self {
        let [c1, c2, c3] = arch.critic_widths;
        Critic {
            stages: [
                Conv::k3("critic.conv1", 9, c1, 2),
                Conv::k3("critic.conv2", c1, c2, 2),
                Conv::k3("critic.conv3", c2, c3, 2),
            ],
            head: Conv::k3("critic.head", c3, 1, 1),
        }
    }

    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamMap<T> {
        let mut p = ParamMap::new();
        for s in &self.stages {
            s.init(&mut p, 1.0, rng);
        }
        self.head.init(&mut p, 1.0, rng);
        p
    }

    /// Scores `[N]` for triples of `[N, 3, H, W]` frames.
    pub fn forward<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        x_t: Var<'g, T>,
        x_prev: Var<'g, T>,
        x_final: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let n = x_t.shape()[0];
        if x_t.shape() != x_prev.shape() || x_prev.shape() != x_final.shape() {
            return Err(Error::shape(format!("{:?}", x_t.shape()), format!("{:?} / {:?}", x_prev.shape(), x_final.shape())));
        }
        let mut h = Var::concat_channels(&[centered(x_t), centered(x_prev), centered(x_final)])?;
        for s in &self.stages {
            h = lrelu(s.forward(p, h))?;
        }
        global_mean_pool(self.head.forward(p, h)?)?.reshape(&[n])
    }
}
