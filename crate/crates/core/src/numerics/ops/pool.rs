//! Pooling, axis reductions, and bilinear upsampling.

use crate::error::{dim_err, Result};
use crate::numerics::tensor::{check_axis, split_axis};
use crate::numerics::{Float, Graph, Tensor, Var};

impl<'p, T: Float> Graph<'p, T> {
    /// 2x2 max pooling with stride 2 on `[B, C, H, W]` (H, W even).
    pub fn max_pool2x2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(dim_err!("max_pool2x2: needs [B, C, even H, even W], got {:?}", s));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); planes * ho * wo];
        let mut arg = vec![0usize; planes * ho * wo];
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = p * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv.data()[i] > xv.data()[best] {
                            best = i;
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = xv.data()[best];
                    arg[o] = best;
                }
            }
        }
        let shape = vec![s[0], s[1], ho, wo];
        self.custom("max_pool2x2", Tensor::from_parts(shape, out), &[x], move |g, sink| {
            sink.with(x, |dx| {
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] = dx[i] + g[o];
                }
            });
        })
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis(xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let nf = T::c(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xv.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                crate::numerics::float::add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|v| *v = *v / nf);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.custom("mean_axis", Tensor::from_parts(shape, out), &[x], move |g, sink| {
            sink.with(x, |dx| {
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            let d = &mut dx[(o * n + k) * inner + i];
                            *d = *d + g[o * inner + i] / nf;
                        }
                    }
                }
            });
        })
    }

    /// Max over `axis`, removing it. Ties route the gradient to the first
    /// maximal element.
    pub fn max_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis(xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let j = (o * n + k) * inner + i;
                    if xv.data()[j] > xv.data()[best] {
                        best = j;
                    }
                }
                out[o * inner + i] = xv.data()[best];
                arg[o * inner + i] = best;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.custom("max_axis", Tensor::from_parts(shape, out), &[x], move |g, sink| {
            sink.with(x, |dx| {
                for (o, &j) in arg.iter().enumerate() {
                    dx[j] = dx[j] + g[o];
                }
            });
        })
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(dim_err!("global_avg_pool: needs [B, C, H, W], got {:?}", s));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        self.mean_axis(flat, 2)
    }

    /// Bilinear x2 upsampling of `[B, C, H, W]` with half-pixel centers
    /// (source coordinate `(dst + 0.5) / 2 - 0.5`, clamped at the border).
    pub fn upsample_bilinear2x(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(dim_err!("upsample_bilinear2x: needs [B, C, H, W], got {:?}", s));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let taps = |dst: usize, n: usize| -> (usize, usize, T) {
            let src = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::c(src - i0 as f64))
        };
        let ys: Vec<_> = (0..ho).map(|y| taps(y, h)).collect();
        let xs: Vec<_> = (0..wo).map(|x| taps(x, w)).collect();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out[(p * ho + oy) * wo + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let shape = vec![s[0], s[1], ho, wo];
        self.custom("upsample_bilinear2x", Tensor::from_parts(shape, out), &[x], move |g, sink| {
            sink.with(x, |dx| {
                for p in 0..planes {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = g[(p * ho + oy) * wo + ox];
                            let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                            d[y0 * w + x0] = d[y0 * w + x0] + gt * (T::one() - fx);
                            d[y0 * w + x1] = d[y0 * w + x1] + gt * fx;
                            d[y1 * w + x0] = d[y1 * w + x0] + gb * (T::one() - fx);
                            d[y1 * w + x1] = d[y1 * w + x1] + gb * fx;
                        }
                    }
                }
            });
        })
    }
}
