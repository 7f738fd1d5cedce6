//! Matrix products: plain matmul, affine layers, and per-group affine layers.

use std::rc::Rc;

use crate::error::{dim_err, Result};
use crate::numerics::float::{add_into, gemm, Mat};
use crate::numerics::{Float, Graph, Tensor, Var};

/// `out[r, o] = b[o] + sum_i x[r, i] * w[o, i]` over `rows` rows.
fn affine_rows<T: Float>(x: &[T], w: &[T], b: Option<&[T]>, din: usize, dout: usize, out: &mut [T]) {
    let rows = x.len() / din;
    match b {
        Some(b) => out.chunks_exact_mut(dout).for_each(|r| r.copy_from_slice(b)),
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
    gemm(Mat::rm(x, rows, din), Mat::rm_t(w, din, dout), T::one(), out);
}

/// Accumulates gradients of [`affine_rows`].
#[allow(clippy::too_many_arguments)]
fn affine_rows_back<T: Float>(
    g: &[T],
    x: &[T],
    w: &[T],
    din: usize,
    dout: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let rows = g.len() / dout;
    if let Some(dx) = dx {
        gemm(Mat::rm(g, rows, dout), Mat::rm(w, dout, din), T::one(), dx);
    }
    if let Some(dw) = dw {
        gemm(Mat::rm_t(g, dout, rows), Mat::rm(x, rows, din), T::one(), dw);
    }
    if let Some(db) = db {
        for gr in g.chunks_exact(dout) {
            add_into(db, gr);
        }
    }
}

impl<'p, T: Float> Graph<'p, T> {
    /// Affine map over the last axis: `x [.., din] -> [.., dout]` with
    /// `w [dout, din]` and optional `b [dout]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape();
        let ws = wv.shape();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(dim_err!("linear: input {:?} incompatible with weight {:?}", xs, ws));
        }
        let (dout, din) = (ws[0], ws[1]);
        let bv = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [dout] {
                    return Err(dim_err!("linear: bias {:?} for weight {:?}", bv.shape(), ws));
                }
                Some(bv)
            }
            None => None,
        };
        let rows = xv.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        affine_rows(xv.data(), wv.data(), bv.as_ref().map(|b| b.data()), din, dout, &mut out);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.custom("linear", Tensor::from_parts(shape, out), &inputs, move |g, sink| {
            let mut dx = sink.needs(x).then(|| vec![T::zero(); rows * din]);
            let mut dw = sink.needs(w).then(|| vec![T::zero(); dout * din]);
            let mut db = b.filter(|b| sink.needs(*b)).map(|_| vec![T::zero(); dout]);
            affine_rows_back(g, xv.data(), wv.data(), din, dout, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            if let Some(dx) = dx {
                sink.add_owned(x, dx);
            }
            if let Some(dw) = dw {
                sink.add_owned(w, dw);
            }
            if let (Some(b), Some(db)) = (b, db) {
                sink.add_owned(b, db);
            }
        })
    }

    /// Per-sequence affine map: sequence `n` of `x [N, L, din]` uses weight
    /// `w[groups[n]]` from `w [K, dout, din]` and bias `b [K, dout]`.
    pub fn grouped_linear(&self, x: Var, w: Var, b: Option<Var>, groups: Rc<Vec<usize>>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[2] || groups.len() != xs[0] {
            return Err(dim_err!(
                "grouped_linear: input {:?}, weight {:?}, {} group labels",
                xs,
                ws,
                groups.len()
            ));
        }
        let (k, dout, din) = (ws[0], ws[1], ws[2]);
        if groups.iter().any(|&gi| gi >= k) {
            return Err(dim_err!("grouped_linear: group label out of range for {} groups", k));
        }
        let bv = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [k, dout] {
                    return Err(dim_err!("grouped_linear: bias {:?} for weight {:?}", bv.shape(), ws));
                }
                Some(bv)
            }
            None => None,
        };
        let (n, l) = (xs[0], xs[1]);
        let mut out = vec![T::zero(); n * l * dout];
        for s in 0..n {
            let gk = groups[s];
            affine_rows(
                &xv.data()[s * l * din..(s + 1) * l * din],
                &wv.data()[gk * dout * din..(gk + 1) * dout * din],
                bv.as_ref().map(|b| &b.data()[gk * dout..(gk + 1) * dout]),
                din,
                dout,
                &mut out[s * l * dout..(s + 1) * l * dout],
            );
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.custom("grouped_linear", Tensor::from_parts(vec![n, l, dout], out), &inputs, move |g, sink| {
            let mut dx = sink.needs(x).then(|| vec![T::zero(); n * l * din]);
            let mut dw = sink.needs(w).then(|| vec![T::zero(); k * dout * din]);
            let mut db = b.filter(|b| sink.needs(*b)).map(|_| vec![T::zero(); k * dout]);
            for s in 0..n {
                let gk = groups[s];
                affine_rows_back(
                    &g[s * l * dout..(s + 1) * l * dout],
                    &xv.data()[s * l * din..(s + 1) * l * din],
                    &wv.data()[gk * dout * din..(gk + 1) * dout * din],
                    din,
                    dout,
                    dx.as_deref_mut().map(|d| &mut d[s * l * din..(s + 1) * l * din]),
                    dw.as_deref_mut().map(|d| &mut d[gk * dout * din..(gk + 1) * dout * din]),
                    db.as_deref_mut().map(|d| &mut d[gk * dout..(gk + 1) * dout]),
                );
            }
            if let Some(dx) = dx {
                sink.add_owned(x, dx);
            }
            if let Some(dw) = dw {
                sink.add_owned(w, dw);
            }
            if let (Some(b), Some(db)) = (b, db) {
                sink.add_owned(b, db);
            }
        })
    }

    /// Matrix product `a [m, k] @ b [k, n]`, or batched over a leading axis
    /// when both operands are rank 3.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(dim_err!("matmul: shapes {:?} and {:?} are incompatible", sa, sb)),
        };
        // transpose b per batch so rows are contiguous for the dot kernel
        let bt = transpose_batched(bv.data(), batch, k, n);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            affine_rows(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                &bt[bi * n * k..(bi + 1) * n * k],
                None,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let bt = Rc::new(bt);
        self.custom("matmul", Tensor::from_parts(shape, out), &[a, b], move |g, sink| {
            let mut da = sink.needs(a).then(|| vec![T::zero(); batch * m * k]);
            let mut dbt = sink.needs(b).then(|| vec![T::zero(); batch * n * k]);
            for bi in 0..batch {
                affine_rows_back(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    &bt[bi * n * k..(bi + 1) * n * k],
                    k,
                    n,
                    da.as_deref_mut().map(|d| &mut d[bi * m * k..(bi + 1) * m * k]),
                    dbt.as_deref_mut().map(|d| &mut d[bi * n * k..(bi + 1) * n * k]),
                    None,
                );
            }
            if let Some(da) = da {
                sink.add_owned(a, da);
            }
            if let Some(dbt) = dbt {
                sink.add_owned(b, transpose_batched(&dbt, batch, n, k));
            }
        })
    }
}

fn transpose_batched<T: Float>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let base = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}
