use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::Sample;
use crate::numerics::Tensor;

/// Foreground fraction every synthetic mask falls in.
pub const FOREGROUND_RANGE: (f64, f64) = (0.05, 0.6);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SynthStyle {
    /// Skin-like background with gratings and pixel noise; textured lesion.
    #[default]
    Textured,
    /// Uniform background and uniform lesion colour.
    Flat,
}

/// Ellipse with a wobbly boundary: `r(phi) = 1 + sum_k amp_k cos(k phi + phase_k)`
/// in the ellipse's normalized frame.
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rot: f64,
    wobble: [(f64, f64); 3],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Blob {
        let m = h.min(w) as f64;
        Blob {
            cx: rng.gen_range(0.3..0.7) * w as f64,
            cy: rng.gen_range(0.3..0.7) * h as f64,
            a: rng.gen_range(0.14..0.3) * m,
            b: rng.gen_range(0.14..0.3) * m,
            rot: rng.gen_range(0.0..PI),
            wobble: std::array::from_fn(|_| (rng.gen_range(0.0..0.06), rng.gen_range(0.0..2.0 * PI))),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let phi = v.atan2(u);
        let r = 1.0 + self.wobble.iter().enumerate().map(|(k, (amp, ph))| amp * ((k + 2) as f64 * phi + ph).cos()).sum::<f64>();
        u * u + v * v <= r * r
    }
}

fn mask_of(blobs: &[Blob], h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            blobs.iter().any(|b| b.contains(x, y))
        })
        .collect()
}

fn one(rng: &mut ChaCha8Rng, h: usize, w: usize, style: SynthStyle) -> (Tensor<f32>, Tensor<f32>) {
    let (lo, hi) = FOREGROUND_RANGE;
    let inside = loop {
        let n = rng.gen_range(1..=2);
        let blobs: Vec<Blob> = (0..n).map(|_| Blob::random(rng, h, w)).collect();
        let m = mask_of(&blobs, h, w);
        let frac = m.iter().filter(|&&v| v).count() as f64 / (h * w) as f64;
        if (lo..=hi).contains(&frac) {
            break m;
        }
    };
    let skin = [rng.gen_range(0.68..0.85), rng.gen_range(0.48..0.62), rng.gen_range(0.38..0.52)];
    let dark = rng.gen_range(0.4..0.62);
    let lesion: [f64; 3] = std::array::from_fn(|c| skin[c] * dark * rng.gen_range(0.9..1.1));
    let mut image = Tensor::zeros(&[3, h, w]);
    let d = image.data_mut();
    match style {
        SynthStyle::Flat => {
            for (i, &fg) in inside.iter().enumerate() {
                for c in 0..3 {
                    d[c * h * w + i] = if fg { lesion[c] } else { skin[c] } as f32;
                }
            }
        }
        SynthStyle::Textured => {
            let f1 = (rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2), rng.gen_range(0.0..2.0 * PI));
            let f2 = (rng.gen_range(0.02..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..2.0 * PI));
            for (i, &fg) in inside.iter().enumerate() {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let grain = 0.03 * (f1.0 * x + f1.1 * y + f1.2).sin() + 0.02 * (f2.0 * x + f2.1 * y + f2.2).sin();
                let spot = if fg { rng.gen_range(-0.06..0.06) } else { 0.0 };
                for c in 0..3 {
                    let base = if fg { lesion[c] } else { skin[c] };
                    let v = base + grain + spot + rng.gen_range(-0.04..0.04);
                    d[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let mask = Tensor::from_fn(&[1, h, w], |i| if inside[i] { 1.0 } else { 0.0 });
    (image, mask)
}

/// `n` lesion-like samples of size `h x w`: one or two filled ellipses with
/// radial boundary noise on a skin-toned background. Sample `i` draws from
/// its own ChaCha stream, so the set is fully determined by `seed`.
pub fn synth_dataset(n: usize, h: usize, w: usize, seed: u64, style: SynthStyle) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (image, mask) = one(&mut rng, h, w, style);
            Sample { id: format!("synth_{:05}", i), image, mask }
        })
        .collect()
}
