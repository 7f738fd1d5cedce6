//! Layer normalization, batch normalization, and softmax.

use crate::error::{dim_err, Result};
use crate::numerics::tensor::{check_axis, split_axis};
use crate::numerics::{BufferId, Float, Graph, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<'p, T: Float> Graph<'p, T> {
    /// Normalizes over the last axis, then applies `gamma`/`beta` (`[C]`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *xv.shape().last().unwrap();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(dim_err!(
                "layer_norm: input {:?} with gamma {:?} and beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            ));
        }
        let rows = xv.numel() / c;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv = vec![T::zero(); rows];
        let cf = T::c(c as f64);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv[r] = is;
            for (h, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv.data()[i % c] + bv.data()[i % c])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.custom("layer_norm", out, &[x, gamma, beta], move |g, sink| {
            let gam = gv.data();
            if sink.needs(x) {
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        m1 = m1 + d;
                        m2 = m2 + d * hr[j];
                    }
                    m1 = m1 / cf;
                    m2 = m2 / cf;
                    for j in 0..c {
                        dx[r * c + j] = inv[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                    }
                }
                sink.add_owned(x, dx);
            }
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (i, &gi) in g.iter().enumerate() {
                dg[i % c] = dg[i % c] + gi * xhat[i];
                db[i % c] = db[i % c] + gi;
            }
            sink.add_owned(gamma, dg);
            sink.add_owned(beta, db);
        })
    }

    /// Batch normalization over `x [B, C, H, W]`. In training mode it uses
    /// batch statistics and records running-statistic updates; in eval mode
    /// it uses the running statistics.
    pub fn batch_norm2d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: BufferId,
        running_var: BufferId,
        eps: T,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let xs = xv.shape().to_vec();
        if xs.len() != 4 || gv.shape() != [xs[1]] || bv.shape() != [xs[1]] {
            return Err(dim_err!("batch_norm2d: input {:?} with gamma {:?}", xs, gv.shape()));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let rm = self.buffer(running_mean);
        let rv = self.buffer(running_var);
        if rm.shape() != [c] || rv.shape() != [c] {
            return Err(dim_err!("batch_norm2d: running stats {:?} for {} channels", rm.shape(), c));
        }
        let elems = move |ch: usize| -> Vec<usize> {
            (0..b).flat_map(|bi| (0..hw).map(move |p| (bi * c + ch) * hw + p)).collect()
        };
        if self.training() {
            let n = (b * hw) as f64;
            let nf = T::c(n);
            let mom = T::c(BN_MOMENTUM);
            let mut xhat = vec![T::zero(); xv.numel()];
            let mut inv = vec![T::zero(); c];
            let mut new_mean = rm.clone();
            let mut new_var = rv.clone();
            for ch in 0..c {
                let idx = elems(ch);
                let mean = idx.iter().map(|&i| xv.data()[i]).sum::<T>() / nf;
                let var = idx.iter().map(|&i| (xv.data()[i] - mean) * (xv.data()[i] - mean)).sum::<T>() / nf;
                inv[ch] = T::one() / (var + eps).sqrt();
                for &i in &idx {
                    xhat[i] = (xv.data()[i] - mean) * inv[ch];
                }
                let unbiased = if n > 1.0 { var * T::c(n / (n - 1.0)) } else { var };
                new_mean.data_mut()[ch] = (T::one() - mom) * rm.data()[ch] + mom * mean;
                new_var.data_mut()[ch] = (T::one() - mom) * rv.data()[ch] + mom * unbiased;
            }
            self.record_buffer_update(running_mean, new_mean);
            self.record_buffer_update(running_var, new_var);
            let out: Vec<T> = xhat
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let ch = (i / hw) % c;
                    h * gv.data()[ch] + bv.data()[ch]
                })
                .collect();
            let out = Tensor::from_parts(xs.clone(), out);
            self.custom("batch_norm2d", out, &[x, gamma, beta], move |g, sink| {
                let gam = gv.data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for ch in 0..c {
                    let idx = elems(ch);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for &i in &idx {
                        m1 = m1 + g[i];
                        m2 = m2 + g[i] * xhat[i];
                    }
                    dg[ch] = m2;
                    db[ch] = m1;
                    let (m1, m2) = (m1 / nf, m2 / nf);
                    for &i in &idx {
                        dx[i] = gam[ch] * inv[ch] * (g[i] - m1 - xhat[i] * m2);
                    }
                }
                sink.add_owned(x, dx);
                sink.add_owned(gamma, dg);
                sink.add_owned(beta, db);
            })
        } else {
            let scale: Vec<T> = (0..c).map(|ch| T::one() / (rv.data()[ch] + eps).sqrt()).collect();
            let xhat: Vec<T> = xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / hw) % c;
                    (v - rm.data()[ch]) * scale[ch]
                })
                .collect();
            let out: Vec<T> = xhat
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let ch = (i / hw) % c;
                    h * gv.data()[ch] + bv.data()[ch]
                })
                .collect();
            let out = Tensor::from_parts(xs.clone(), out);
            self.custom("batch_norm2d", out, &[x, gamma, beta], move |g, sink| {
                let gam = gv.data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dx[i] = gi * gam[ch] * scale[ch];
                    dg[ch] = dg[ch] + gi * xhat[i];
                    db[ch] = db[ch] + gi;
                }
                sink.add_owned(x, dx);
                sink.add_owned(gamma, dg);
                sink.add_owned(beta, db);
            })
        }
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis(xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let xd = xv.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..n {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    s = s + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / s;
                }
            }
        }
        let yv = std::rc::Rc::new(out.clone());
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.custom("softmax", out, &[x], move |g, sink| {
            sink.with(x, |dx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dotp = (0..n).map(|k| g[at(k)] * yv[at(k)]).sum::<T>();
                        for k in 0..n {
                            dx[at(k)] = dx[at(k)] + yv[at(k)] * (g[at(k)] - dotp);
                        }
                    }
                }
            });
        })
    }
}
