//! Sampling painting videos backward from a finished painting, using only
//! the generator and the prior.

use crate::autodiff::Graph;
use crate::domain::{Frame, FrameShape, Medium, PaintingVideo};
use crate::error::{Error, Result};
use crate::losses::apply_delta_term;
use crate::networks::{Bound, ModelParams};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::training::steps::{normal_noise, stack_frames};

pub const DEFAULT_STEPS: usize = 40;

/// How many samples share one batched rollout in [`synthesize_many`].
const ROLLOUT_CHUNK: usize = 8;

#[derive(Clone, Debug)]
pub struct SynthesisRequest<'a> {
    pub x_final: Frame,
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub params: &'a ModelParams,
    /// Resolution the model was trained at; other sizes are rejected when set.
    pub trained_shape: Option<FrameShape>,
}

impl<'a> SynthesisRequest<'a> {
    pub fn new(x_final: Frame, params: &'a ModelParams, seed: u64) -> Self {
        SynthesisRequest { x_final, steps: DEFAULT_STEPS, n_samples: 1, seed, params, trained_shape: None }
    }

    fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.n_samples < 1 {
            return Err(Error::invalid(format!("steps ({}) and n_samples ({}) must be at least 1", self.steps, self.n_samples)));
        }
        if let Some(s) = self.trained_shape {
            if s != self.x_final.shape() {
                return Err(Error::shape(format!("painting at trained resolution {}", s), self.x_final.shape().to_string()));
            }
        }
        Ok(())
    }
}

/// Seed of sample `index` under master seed `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, index as u64)
}

/// Rolls out one video per stream, all toward the same painting.
fn rollout(params: &ModelParams, x_final: &Frame, steps: usize, streams: &mut [Stream], id_of: impl Fn(usize) -> String) -> Result<Vec<PaintingVideo>> {
    let n = streams.len();
    let d = params.latent_dim();
    let g = Graph::<f32>::inference();
    let theta = Bound::new(&g, &params.theta, false);
    let gen = params.arch.generator();
    let xf = g.constant(stack_frames(&vec![x_final; n])?);
    let (h, w) = (x_final.height(), x_final.width());
    let mut prev = g.constant(Tensor::full(&[n, 3, h, w], 1.0f32));
    let mut frames: Vec<Vec<Frame>> = (0..n).map(|_| vec![Frame::blank(h, w)]).collect();
    for _ in 0..steps {
        // each sample draws its latent from its own stream
        let mut z = Vec::with_capacity(n * d);
        for s in streams.iter_mut() {
            z.extend_from_slice(normal_noise(1, d, s).data());
        }
        let z = g.constant(Tensor::new(vec![n, d], z)?);
        let next = apply_delta_term(prev, gen.forward(&theta, z, prev, xf)?);
        let value = next.value();
        for (i, f) in frames.iter_mut().enumerate() {
            f.push(Frame::from_tensor(&value, i)?);
        }
        prev = g.constant((*value).clone());
    }
    frames.into_iter().enumerate().map(|(i, f)| PaintingVideo::new(id_of(i), Medium::Synthetic, None, f)).collect()
}

/// One video of `steps + 1` frames from the blank canvas, latents drawn from `req.seed`.
pub fn synthesize_video(req: &SynthesisRequest<'_>) -> Result<PaintingVideo> {
    req.validate()?;
    let mut s = [rng::stream(req.seed)];
    Ok(rollout(req.params, &req.x_final, req.steps, &mut s, |_| "sample".to_string())?.remove(0))
}

/// Lazily produced samples; sample `i` equals [`synthesize_video`] with seed [`sample_seed`]`(seed, i)`.
pub struct SampleStream<'a> {
    req: SynthesisRequest<'a>,
    next: usize,
    buffer: std::collections::VecDeque<PaintingVideo>,
}

impl Iterator for SampleStream<'_> {
    type Item = Result<PaintingVideo>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.buffer.is_empty() {
            if self.next >= self.req.n_samples {
                return None;
            }
            let start = self.next;
            let end = (start + ROLLOUT_CHUNK).min(self.req.n_samples);
            let mut streams: Vec<Stream> = (start..end).map(|i| rng::stream(sample_seed(self.req.seed, i))).collect();
            match rollout(self.req.params, &self.req.x_final, self.req.steps, &mut streams, |i| format!("sample_{:04}", start + i)) {
                Ok(v) => self.buffer.extend(v),
                Err(e) => {
                    self.next = self.req.n_samples;
                    return Some(Err(e));
                }
            }
            self.next = end;
        }
        self.buffer.pop_front().map(Ok)
    }
}

pub fn sample_stream<'a>(req: &SynthesisRequest<'a>) -> Result<SampleStream<'a>> {
    req.validate()?;
    Ok(SampleStream { req: req.clone(), next: 0, buffer: Default::default() })
}

/// `req.n_samples` independent videos in index order.
pub fn synthesize_many(req: &SynthesisRequest<'_>) -> Result<Vec<PaintingVideo>> {
    sample_stream(req)?.collect()
}
