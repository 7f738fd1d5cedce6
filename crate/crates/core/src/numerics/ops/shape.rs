//! Layout operations: reshape, permute, concatenate, slice, row gather.

use std::rc::Rc;

use crate::error::{dim_err, Result};
use crate::numerics::tensor::{check_axis, split_axis};
use crate::numerics::{Float, Graph, Tensor, Var};

fn permute_data<T: Float>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // stride in the input for each output axis
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != xv.numel() {
            return Err(dim_err!("reshape: {:?} cannot become {:?}", xv.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        self.custom("reshape", out, &[x], move |g, sink| sink.add(x, g))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!("permute: {:?} is not a permutation for shape {:?}", axes, xv.shape()));
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape = shape.clone();
        self.custom("permute", Tensor::from_parts(shape, data), &[x], move |g, sink| {
            if sink.needs(x) {
                let (back, _) = permute_data(g, &out_shape, &inverse);
                sink.add_owned(x, back);
            }
        })
    }

    /// 2D transpose of the last two axes.
    pub fn transpose_last(&self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(dim_err!("transpose_last needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(x, &axes)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals.first().ok_or_else(|| dim_err!("concat: no inputs"))?;
        check_axis(first.shape(), axis)?;
        for v in &vals {
            let ok = v.rank() == first.rank()
                && v.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(dim_err!("concat: shapes {:?} and {:?} differ off axis {}", first.shape(), v.shape(), axis));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let extents: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in vals.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let inputs = xs.to_vec();
        self.custom("concat", Tensor::from_parts(shape, out), xs, move |g, sink| {
            let mut start = 0;
            for (&v, &e) in inputs.iter().zip(&extents) {
                sink.with(v, |dv| {
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + e) * inner];
                        crate::numerics::float::add_into(&mut dv[o * e * inner..(o + 1) * e * inner], src);
                    }
                });
                start += e;
            }
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis(xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if len == 0 || start + len > n {
            return Err(dim_err!("narrow: [{}, {}) outside axis {} of {:?}", start, start + len, axis, xv.shape()));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.custom("narrow", Tensor::from_parts(shape, out), &[x], move |g, sink| {
            sink.with(x, |dx| {
                for o in 0..outer {
                    crate::numerics::float::add_into(
                        &mut dx[(o * n + start) * inner..(o * n + start + len) * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            });
        })
    }

    /// Splits `axis` into `parts` equal pieces.
    pub fn chunk(&self, x: Var, parts: usize, axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        check_axis(&shape, axis)?;
        if parts == 0 || shape[axis] % parts != 0 {
            return Err(dim_err!("chunk: axis {} of {:?} is not divisible into {} parts", axis, shape, parts));
        }
        let step = shape[axis] / parts;
        (0..parts).map(|i| self.narrow(x, axis, i * step, step)).collect()
    }

    /// Row gather: views `x` as rows of length `row_len` and builds
    /// `out_rows` rows where row `r` copies input row `index[r]`, or zeros
    /// when `index[r]` is `None`. The adjoint is a scatter-add.
    pub fn gather_rows(
        &self,
        x: Var,
        row_len: usize,
        index: Rc<Vec<Option<usize>>>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let xv = self.value(x);
        if row_len == 0 || xv.numel() % row_len != 0 {
            return Err(dim_err!("gather_rows: row length {} does not divide {:?}", row_len, xv.shape()));
        }
        let in_rows = xv.numel() / row_len;
        let n: usize = out_shape.iter().product();
        if n != index.len() * row_len {
            return Err(dim_err!("gather_rows: {} rows of {} do not fill {:?}", index.len(), row_len, out_shape));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= in_rows) {
            return Err(dim_err!("gather_rows: source row {} out of {}", bad, in_rows));
        }
        let mut out = vec![T::zero(); n];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = src {
                out[r * row_len..(r + 1) * row_len].copy_from_slice(&xv.data()[s * row_len..(s + 1) * row_len]);
            }
        }
        self.custom("gather_rows", Tensor::from_parts(out_shape.to_vec(), out), &[x], move |g, sink| {
            sink.with(x, |dx| {
                for (r, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        crate::numerics::float::add_into(
                            &mut dx[s * row_len..(s + 1) * row_len],
                            &g[r * row_len..(r + 1) * row_len],
                        );
                    }
                }
            });
        })
    }
}
