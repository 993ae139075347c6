//! Frozen random-weight feature extractor. A small convolution stack stands
//! in for an ImageNet backbone: its weights are drawn once from a seeded
//! generator, never trained, and never enter a parameter store. Mid-level
//! features concatenate two stages at half resolution; high-level features
//! come from one more strided stage at quarter resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{conv3x3_forward, uniform_init};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Tensor};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Channel count of the mid-level output (split across two stages).
    pub mid_channels: usize,
    /// Channel count of the high-level output.
    pub high_channels: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mid_channels: 256,
            high_channels: 64,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    w0: Tensor,
    b0: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w_high: Tensor,
    b_high: Tensor,
    pub mid_channels: usize,
    pub high_channels: usize,
}

impl ToyEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.mid_channels == 0 || cfg.mid_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "mid_channels must be positive and even, got {}",
                cfg.mid_channels
            )));
        }
        if cfg.high_channels == 0 {
            return Err(Error::Config("high_channels must be positive".into()));
        }
        let half = cfg.mid_channels / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut conv = |out_c: usize, in_c: usize| {
            let w = uniform_init(&mut rng, &[out_c, in_c, 3, 3], in_c * 9);
            let b = uniform_init(&mut rng, &[out_c], in_c * 9);
            (w, b)
        };
        let (w0, b0) = conv(8, 3);
        let (w1, b1) = conv(half, 8);
        let (w2, b2) = conv(half, half);
        let (w_high, b_high) = conv(cfg.high_channels, half);
        Ok(Self {
            w0,
            b0,
            w1,
            b1,
            w2,
            b2,
            w_high,
            b_high,
            mid_channels: cfg.mid_channels,
            high_channels: cfg.high_channels,
        })
    }

    /// `[3,h,w]` image to (mid `[mid_channels, ceil(h/2), ceil(w/2)]`,
    /// high `[high_channels, ceil(h/4), ceil(w/4)]`).
    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects [3,h,w], got {:?}",
                image.shape()
            )));
        }
        // per-image standardization so the stack sees zero-mean unit-variance
        // input regardless of the corpus' contrast
        let mut x = image.clone();
        let n = x.data().len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / var.sqrt().max(1e-6);
        for v in x.data_mut() {
            *v = (*v - mean) * inv_std;
        }
        let s0 = relu(conv3x3_forward(&x, &self.w0, &self.b0, 1)?);
        let s1 = relu(conv3x3_forward(&s0, &self.w1, &self.b1, 2)?);
        let s2 = relu(conv3x3_forward(&s1, &self.w2, &self.b2, 1)?);
        let mid = concat_channels(&s1, &s2)?;
        let high = relu(conv3x3_forward(&s2, &self.w_high, &self.b_high, 2)?);
        Ok((mid, high))
    }
}

fn relu(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    t
}
