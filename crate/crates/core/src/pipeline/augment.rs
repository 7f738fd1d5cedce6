use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use crate::numerics::Tensor;

/// Per-channel dataset statistics for input normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl Normalization {
    /// Population mean and standard deviation over every pixel of `samples`.
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for s in samples {
            let plane = s.height() * s.width();
            for (c, ch) in s.image.data().chunks_exact(plane).enumerate() {
                for &v in ch {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Self::default();
        }
        let n = count as f64;
        let mean: [f64; 3] = std::array::from_fn(|c| sum[c] / n);
        Normalization {
            mean: std::array::from_fn(|c| mean[c] as f32),
            std: std::array::from_fn(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6) as f32),
        }
    }

    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let plane = image.numel() / 3;
        let mut out = image.clone();
        for (c, ch) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            for v in ch {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Flips and a counter-clockwise rotation by `quarter_turns * 90` degrees,
/// applied in that order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    /// Flips with probability 1/2 each, rotation uniform over right angles
    /// (over half turns only when the image is not square).
    pub fn random(rng: &mut impl Rng, square: bool) -> Self {
        let hflip = rng.gen_bool(0.5);
        let vflip = rng.gen_bool(0.5);
        let quarter_turns = if square { rng.gen_range(0..4) } else { 2 * rng.gen_range(0..2) };
        Transform { hflip, vflip, quarter_turns }
    }

    /// Applies to a `[C, H, W]` tensor.
    pub fn apply(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let s = x.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let turns = self.quarter_turns % 4;
        let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let src = x.data();
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let d = out.data_mut();
        for i in 0..oh {
            for j in 0..ow {
                // output (i, j) of the rotation reads flipped (y, x)
                let (y, xx) = match turns {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                let y = if self.vflip { h - 1 - y } else { y };
                let xx = if self.hflip { w - 1 - xx } else { xx };
                for ch in 0..c {
                    d[ch * oh * ow + i * ow + j] = src[ch * h * w + y * w + xx];
                }
            }
        }
        out
    }
}

/// Random flips and right-angle rotation, identical for image and mask,
/// then per-channel normalization of the image.
pub fn augment(s: &Sample, rng: &mut impl Rng, norm: &Normalization) -> Sample {
    let t = Transform::random(rng, s.height() == s.width());
    Sample { id: s.id.clone(), image: norm.apply(&t.apply(&s.image)), mask: t.apply(&s.mask) }
}
