//! Cross-correlation: 2D (grouped, dilated) and 1D causal depthwise.

use crate::error::{dim_err, Result};
use crate::numerics::float::{add_into, axpy, dot, gemm, Mat};
use crate::numerics::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    /// (rows, cols) of zero padding on each side.
    pub padding: (usize, usize),
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts { stride: 1, padding: (0, 0), dilation: 1, groups: 1 }
    }
}

impl Conv2dOpts {
    pub fn same(kernel: usize) -> Self {
        Conv2dOpts { padding: (kernel / 2, kernel / 2), ..Default::default() }
    }

    pub fn out_extent(&self, input: usize, kernel: usize, pad: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * pad).checked_sub(span).map(|v| v / self.stride + 1)
    }
}

struct Geometry {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOpts,
}

impl Geometry {
    /// Valid output-column range and the matching first input column for
    /// kernel column `kx` (stride 1 fast path).
    fn col_range(&self, kx: usize) -> (usize, usize, usize) {
        let off = kx * self.opts.dilation;
        let pw = self.opts.padding.1;
        let lo = pw.saturating_sub(off);
        let hi = (self.w + pw).saturating_sub(off).min(self.wo);
        let ix0 = (lo + off).saturating_sub(pw);
        (lo, hi.max(lo), ix0)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = oy * self.opts.stride + ky * self.opts.dilation;
        y.checked_sub(self.opts.padding.0).filter(|&iy| iy < self.h)
    }

    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let x = ox * self.opts.stride + kx * self.opts.dilation;
        x.checked_sub(self.opts.padding.1).filter(|&ix| ix < self.w)
    }
}

impl Geometry {
    /// Dense stride-1 convolutions go through im2col and a matrix product.
    fn use_gemm(&self) -> bool {
        self.opts.groups == 1 && self.opts.stride == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.padding == (0, 0)
    }

    /// Unfolds one image `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]`.
    fn im2col<T: Float>(&self, img: &[T], cols: &mut [T]) {
        let (p, h, w, wo) = (self.ho * self.wo, self.h, self.w, self.wo);
        for ic in 0..self.cin {
            let src = &img[ic * h * w..(ic + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((ic * self.kh + ky) * self.kw + kx) * p..][..p];
                    let (lo, hi, ix0) = self.col_range(kx);
                    for oy in 0..self.ho {
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        match self.in_row(oy, ky) {
                            Some(iy) if hi > lo => {
                                dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                                dst[lo..hi].copy_from_slice(&src[iy * w + ix0..iy * w + ix0 + hi - lo]);
                                dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                            }
                            _ => dst.iter_mut().for_each(|v| *v = T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: folds columns back, accumulating.
    fn col2im<T: Float>(&self, cols: &[T], img: &mut [T]) {
        let (p, h, w, wo) = (self.ho * self.wo, self.h, self.w, self.wo);
        for ic in 0..self.cin {
            let dst = &mut img[ic * h * w..(ic + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((ic * self.kh + ky) * self.kw + kx) * p..][..p];
                    let (lo, hi, ix0) = self.col_range(kx);
                    if hi <= lo {
                        continue;
                    }
                    for oy in 0..self.ho {
                        if let Some(iy) = self.in_row(oy, ky) {
                            add_into(&mut dst[iy * w + ix0..iy * w + ix0 + hi - lo], &row[oy * wo + lo..oy * wo + hi]);
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward_gemm<T: Float>(x: &[T], wt: &[T], bias: Option<&[T]>, geo: &Geometry) -> Vec<T> {
    let (p, kdim, cout) = (geo.ho * geo.wo, geo.cin * geo.kh * geo.kw, geo.cout);
    let img = geo.cin * geo.h * geo.w;
    let mut out = vec![T::zero(); geo.b * cout * p];
    let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { kdim * p }];
    for bi in 0..geo.b {
        let o = &mut out[bi * cout * p..(bi + 1) * cout * p];
        if let Some(bias) = bias {
            for (plane, &bv) in o.chunks_exact_mut(p).zip(bias) {
                plane.iter_mut().for_each(|v| *v = bv);
            }
        }
        let xi = &x[bi * img..(bi + 1) * img];
        let cm = if geo.is_pointwise() {
            xi
        } else {
            geo.im2col(xi, &mut cols);
            &cols
        };
        gemm(Mat::rm(wt, cout, kdim), Mat::rm(cm, kdim, p), T::one(), o);
    }
    out
}

fn conv2d_backward_gemm<T: Float>(
    g: &[T],
    x: &[T],
    wt: &[T],
    geo: &Geometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (p, kdim, cout) = (geo.ho * geo.wo, geo.cin * geo.kh * geo.kw, geo.cout);
    let img = geo.cin * geo.h * geo.w;
    let pointwise = geo.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kdim * p }];
    let mut dcols = vec![T::zero(); if pointwise || dx.is_none() { 0 } else { kdim * p }];
    for bi in 0..geo.b {
        let gi = &g[bi * cout * p..(bi + 1) * cout * p];
        if let Some(db) = db.as_deref_mut() {
            for (d, plane) in db.iter_mut().zip(gi.chunks_exact(p)) {
                *d = *d + plane.iter().copied().sum::<T>();
            }
        }
        let xi = &x[bi * img..(bi + 1) * img];
        if let Some(dw) = dw.as_deref_mut() {
            let cm = if pointwise {
                xi
            } else {
                geo.im2col(xi, &mut cols);
                &cols
            };
            gemm(Mat::rm(gi, cout, p), Mat::rm_t(cm, p, kdim), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[bi * img..(bi + 1) * img];
            let wt_t = Mat::rm_t(wt, kdim, cout);
            if pointwise {
                gemm(wt_t, Mat::rm(gi, cout, p), T::one(), dxi);
            } else {
                gemm(wt_t, Mat::rm(gi, cout, p), T::zero(), &mut dcols);
                geo.col2im(&dcols, dxi);
            }
        }
    }
}

fn conv2d_forward<T: Float>(x: &[T], wt: &[T], bias: Option<&[T]>, geo: &Geometry) -> Vec<T> {
    let Geometry { b, cin, h, w, cout, cin_g, kh, kw, ho, wo, opts } = *geo;
    let cout_g = cout / opts.groups;
    let mut out = vec![T::zero(); b * cout * ho * wo];
    for bi in 0..b {
        for oc in 0..cout {
            let grp = oc / cout_g;
            let plane = &mut out[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
            if let Some(bias) = bias {
                plane.iter_mut().for_each(|v| *v = bias[oc]);
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let src = &x[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((oc * cin_g + icg) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..ho {
                            let Some(iy) = geo.in_row(oy, ky) else { continue };
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            let irow = &src[iy * w..(iy + 1) * w];
                            if opts.stride == 1 {
                                let (lo, hi, ix0) = geo.col_range(kx);
                                if hi > lo {
                                    axpy(wv, &irow[ix0..ix0 + hi - lo], &mut orow[lo..hi]);
                                }
                            } else {
                                for ox in 0..wo {
                                    if let Some(ix) = geo.in_col(ox, kx) {
                                        orow[ox] = orow[ox] + wv * irow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Float>(
    g: &[T],
    x: &[T],
    wt: &[T],
    geo: &Geometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let Geometry { b, cin, h, w, cout, cin_g, kh, kw, ho, wo, opts } = *geo;
    let cout_g = cout / opts.groups;
    for bi in 0..b {
        for oc in 0..cout {
            let grp = oc / cout_g;
            let gplane = &g[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
            if let Some(db) = db.as_deref_mut() {
                db[oc] = db[oc] + gplane.iter().copied().sum::<T>();
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xoff = (bi * cin + ic) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let Some(iy) = geo.in_row(oy, ky) else { continue };
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let row_off = xoff + iy * w;
                            if opts.stride == 1 {
                                let (lo, hi, ix0) = geo.col_range(kx);
                                if hi <= lo {
                                    continue;
                                }
                                let len = hi - lo;
                                if dw.is_some() {
                                    acc = acc + dot(&grow[lo..hi], &x[row_off + ix0..row_off + ix0 + len]);
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    axpy(wv, &grow[lo..hi], &mut dx[row_off + ix0..row_off + ix0 + len]);
                                }
                            } else {
                                for ox in 0..wo {
                                    if let Some(ix) = geo.in_col(ox, kx) {
                                        acc = acc + grow[ox] * x[row_off + ix];
                                        if let Some(dx) = dx.as_deref_mut() {
                                            dx[row_off + ix] = dx[row_off + ix] + wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
}

impl<'p, T: Float> Graph<'p, T> {
    /// 2D cross-correlation on `x [B, Cin, H, W]` with
    /// `w [Cout, Cin/groups, kh, kw]` and optional `b [Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        let bad = || dim_err!("conv2d: input {:?} incompatible with weight {:?} ({:?})", xs, ws, opts);
        if xs.len() != 4 || ws.len() != 4 || opts.groups == 0 || opts.dilation == 0 || opts.stride == 0 {
            return Err(bad());
        }
        let (cin, cout) = (xs[1], ws[0]);
        if cin % opts.groups != 0 || cout % opts.groups != 0 || ws[1] * opts.groups != cin {
            return Err(bad());
        }
        let ho = opts.out_extent(xs[2], ws[2], opts.padding.0).filter(|&v| v > 0).ok_or_else(bad)?;
        let wo = opts.out_extent(xs[3], ws[3], opts.padding.1).filter(|&v| v > 0).ok_or_else(bad)?;
        let geo = Geometry {
            b: xs[0],
            cin,
            h: xs[2],
            w: xs[3],
            cout,
            cin_g: ws[1],
            kh: ws[2],
            kw: ws[3],
            ho,
            wo,
            opts,
        };
        let bv = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [cout] {
                    return Err(dim_err!("conv2d: bias {:?} for {} output channels", bv.shape(), cout));
                }
                Some(bv)
            }
            None => None,
        };
        let bias = bv.as_ref().map(|t| t.data());
        let out = if geo.use_gemm() {
            conv2d_forward_gemm(xv.data(), wv.data(), bias, &geo)
        } else {
            conv2d_forward(xv.data(), wv.data(), bias, &geo)
        };
        let shape = vec![geo.b, cout, ho, wo];
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.custom("conv2d", Tensor::from_parts(shape, out), &inputs, move |g, sink| {
            let mut dx = sink.needs(x).then(|| vec![T::zero(); xv.numel()]);
            let mut dw = sink.needs(w).then(|| vec![T::zero(); wv.numel()]);
            let mut db = b.filter(|b| sink.needs(*b)).map(|_| vec![T::zero(); cout]);
            let (dxm, dwm, dbm) = (dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            if geo.use_gemm() {
                conv2d_backward_gemm(g, xv.data(), wv.data(), &geo, dxm, dwm, dbm);
            } else {
                conv2d_backward(g, xv.data(), wv.data(), &geo, dxm, dwm, dbm);
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

    /// Causal depthwise convolution along the sequence axis of
    /// `x [N, L, C]` with `w [C, k]` and `b [C]`: output step `t` sees
    /// inputs `t-k+1 ..= t`, zero before the start.
    pub fn conv1d_causal(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || bv.shape() != [xs[2]] {
            return Err(dim_err!(
                "conv1d_causal: input {:?}, weight {:?}, bias {:?}",
                xs,
                ws,
                bv.shape()
            ));
        }
        let (n, l, c) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![T::zero(); n * l * c];
        for s in 0..n {
            for t in 0..l {
                let orow = &mut out[(s * l + t) * c..(s * l + t + 1) * c];
                orow.copy_from_slice(bv.data());
                for j in 0..k {
                    // tap j reads x[t - (k-1) + j]
                    let Some(src_t) = (t + j).checked_sub(k - 1) else { continue };
                    let irow = &xd[(s * l + src_t) * c..(s * l + src_t + 1) * c];
                    for ch in 0..c {
                        orow[ch] = orow[ch] + wd[ch * k + j] * irow[ch];
                    }
                }
            }
        }
        self.custom("conv1d_causal", Tensor::from_parts(xs.to_vec(), out), &[x, w, b], move |g, sink| {
            let (xd, wd) = (xv.data(), wv.data());
            let need_x = sink.needs(x);
            let mut dx = vec![T::zero(); if need_x { n * l * c } else { 0 }];
            let mut dw = vec![T::zero(); c * k];
            let mut db = vec![T::zero(); c];
            for s in 0..n {
                for t in 0..l {
                    let grow = &g[(s * l + t) * c..(s * l + t + 1) * c];
                    for ch in 0..c {
                        db[ch] = db[ch] + grow[ch];
                    }
                    for j in 0..k {
                        let Some(src_t) = (t + j).checked_sub(k - 1) else { continue };
                        let base = (s * l + src_t) * c;
                        for ch in 0..c {
                            dw[ch * k + j] = dw[ch * k + j] + grow[ch] * xd[base + ch];
                            if need_x {
                                dx[base + ch] = dx[base + ch] + grow[ch] * wd[ch * k + j];
                            }
                        }
                    }
                }
            }
            if need_x {
                sink.add_owned(x, dx);
            }
            sink.add_owned(w, dw);
            sink.add_owned(b, db);
        })
    }
}
