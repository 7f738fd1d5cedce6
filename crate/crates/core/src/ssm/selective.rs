use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

/// Fused selective scan over `N` sequences.
///
/// * `u`, `delta`: `[N, L, D]`, `delta > 0`
/// * `a`: `[K, D, S]` state matrix (negative for a stable recurrence)
/// * `b`, `c`: `[N, L, S]`
/// * `d`: `[K, D]` skip term
/// * `groups[n]` picks the `(a, d)` bundle used by sequence `n`
///
/// `h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * u_t`, `h_0 = 0`,
/// `y_t = c_t . h_t + d * u_t`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Float>(
    g: &Graph<'_, T>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    groups: Rc<Vec<usize>>,
) -> Result<Var> {
    let (uv, dv, av, bv, cv, dd) = (g.value(u), g.value(delta), g.value(a), g.value(b), g.value(c), g.value(d));
    let us = uv.shape();
    if us.len() != 3 || dv.shape() != us || av.rank() != 3 || av.shape()[1] != us[2] {
        return Err(dim_err!(
            "selective_scan: u {:?}, delta {:?}, A {:?}",
            us,
            dv.shape(),
            av.shape()
        ));
    }
    let (n, l, di) = (us[0], us[1], us[2]);
    let (k, ns) = (av.shape()[0], av.shape()[2]);
    if bv.shape() != [n, l, ns] || cv.shape() != [n, l, ns] || dd.shape() != [k, di] {
        return Err(dim_err!(
            "selective_scan: B {:?}, C {:?}, D {:?} for u {:?} and A {:?}",
            bv.shape(),
            cv.shape(),
            dd.shape(),
            us,
            av.shape()
        ));
    }
    if groups.len() != n || groups.iter().any(|&gk| gk >= k) {
        return Err(dim_err!("selective_scan: {} group labels for {} sequences and {} bundles", groups.len(), n, k));
    }

    let dims = Dims { n, l, di, ns };
    let y = {
        let inp = Inputs::new(&uv, &dv, &av, &bv, &cv, &dd, &groups);
        match lane_width(ns) {
            16 => forward::<T, 16>(dims, &inp),
            8 => forward::<T, 8>(dims, &inp),
            4 => forward::<T, 4>(dims, &inp),
            _ => forward::<T, 1>(dims, &inp),
        }?
    };

    let inputs = [u, delta, a, b, c, d];
    g.custom("selective_scan", Tensor::from_parts(vec![n, l, di], y), &inputs, move |gy, sink| {
        let inp = Inputs::new(&uv, &dv, &av, &bv, &cv, &dd, &groups);
        let mut gr = ScanGrads {
            du: vec![T::zero(); n * l * di],
            ddelta: vec![T::zero(); n * l * di],
            da: vec![T::zero(); k * di * ns],
            db: vec![T::zero(); n * l * ns],
            dc: vec![T::zero(); n * l * ns],
            dd: vec![T::zero(); k * di],
        };
        match lane_width(ns) {
            16 => backward::<T, 16>(dims, &inp, gy, &mut gr),
            8 => backward::<T, 8>(dims, &inp, gy, &mut gr),
            4 => backward::<T, 4>(dims, &inp, gy, &mut gr),
            _ => backward::<T, 1>(dims, &inp, gy, &mut gr),
        }
        sink.add_owned(u, gr.du);
        sink.add_owned(delta, gr.ddelta);
        sink.add_owned(a, gr.da);
        sink.add_owned(b, gr.db);
        sink.add_owned(c, gr.dc);
        sink.add_owned(d, gr.dd);
    })
}

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    l: usize,
    di: usize,
    ns: usize,
}

struct Inputs<'a, T> {
    u: &'a [T],
    delta: &'a [T],
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    d: &'a [T],
    groups: &'a [usize],
}

impl<'a, T: Float> Inputs<'a, T> {
    fn new(
        u: &'a Tensor<T>,
        delta: &'a Tensor<T>,
        a: &'a Tensor<T>,
        b: &'a Tensor<T>,
        c: &'a Tensor<T>,
        d: &'a Tensor<T>,
        groups: &'a [usize],
    ) -> Self {
        Inputs { u: u.data(), delta: delta.data(), a: a.data(), b: b.data(), c: c.data(), d: d.data(), groups }
    }
}

struct ScanGrads<T> {
    du: Vec<T>,
    ddelta: Vec<T>,
    da: Vec<T>,
    db: Vec<T>,
    dc: Vec<T>,
    dd: Vec<T>,
}

/// Widest chunk the state dimension splits into, so inner loops have a
/// compile-time length.
fn lane_width(ns: usize) -> usize {
    [16, 8, 4].into_iter().find(|w| ns % w == 0).unwrap_or(1)
}

#[inline(always)]
fn lanes_sum<T: Float, const N: usize>(mut v: [T; N]) -> T {
    // pairwise, N is a power of two
    let mut w = N;
    while w > 1 {
        w /= 2;
        for i in 0..w {
            v[i] = v[i] + v[i + w];
        }
    }
    v[0]
}

/// Advances one channel's state `h` by a timestep, stores the decay
/// factors in `e` and returns `c . h`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn advance<T: Float, const N: usize>(
    dt: T,
    dtx: T,
    first: bool,
    a: &[T],
    bt: &[T],
    ct: &[T],
    e: &mut [T],
    h: &mut [T],
) -> T {
    let mut acc = [T::zero(); N];
    let chunks = h.chunks_exact_mut(N).zip(e.chunks_exact_mut(N)).zip(a.chunks_exact(N));
    for (((hc, ec), ac), (bc, cc)) in chunks.zip(bt.chunks_exact(N).zip(ct.chunks_exact(N))) {
        if first {
            for i in 0..N {
                hc[i] = dtx * bc[i];
                acc[i] = acc[i] + cc[i] * hc[i];
            }
        } else {
            for i in 0..N {
                let ev = (dt * ac[i]).fast_exp();
                ec[i] = ev;
                hc[i] = ev * hc[i] + dtx * bc[i];
                acc[i] = acc[i] + cc[i] * hc[i];
            }
        }
    }
    lanes_sum(acc)
}

fn forward<T: Float, const N: usize>(dims: Dims, inp: &Inputs<T>) -> Result<Vec<T>> {
    let Dims { n, l, di, ns } = dims;
    let plane = di * ns;
    let mut y = vec![T::zero(); n * l * di];
    let mut h = vec![T::zero(); plane];
    let mut decay = vec![T::zero(); plane];
    for s in 0..n {
        let gk = inp.groups[s];
        let a_g = &inp.a[gk * plane..(gk + 1) * plane];
        let d_g = &inp.d[gk * di..(gk + 1) * di];
        for t in 0..l {
            let row = (s * l + t) * di;
            let srow = (s * l + t) * ns;
            let (bt, ct) = (&inp.b[srow..srow + ns], &inp.c[srow..srow + ns]);
            for ch in 0..di {
                let (dt, x) = (inp.delta[row + ch], inp.u[row + ch]);
                let r = ch * ns..(ch + 1) * ns;
                let ch_y = advance::<T, N>(dt, dt * x, t == 0, &a_g[r.clone()], bt, ct, &mut decay[r.clone()], &mut h[r]);
                y[row + ch] = ch_y + d_g[ch] * x;
            }
            if y[row..row + di].iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "selective scan state became non-finite at timestep {} of sequence {}",
                    t, s
                )));
            }
        }
    }
    Ok(y)
}

fn backward<T: Float, const N: usize>(dims: Dims, inp: &Inputs<T>, gy: &[T], gr: &mut ScanGrads<T>) {
    let Dims { n, l, di, ns } = dims;
    let plane = di * ns;
    // states and decays of one sequence, recomputed from the inputs
    let mut hs = vec![T::zero(); l * plane];
    let mut das = vec![T::zero(); l * plane];
    // carry[ch, j] = exp(delta_{t+1} a) * dh_{t+1}
    let mut carry = vec![T::zero(); plane];
    for s in 0..n {
        let gk = inp.groups[s];
        let a_g = &inp.a[gk * plane..(gk + 1) * plane];
        for t in 0..l {
            let row = (s * l + t) * di;
            let srow = (s * l + t) * ns;
            let (bt, ct) = (&inp.b[srow..srow + ns], &inp.c[srow..srow + ns]);
            let (done, rest) = hs.split_at_mut(t * plane);
            let h = &mut rest[..plane];
            if t > 0 {
                h.copy_from_slice(&done[(t - 1) * plane..]);
            }
            let e = &mut das[t * plane..(t + 1) * plane];
            for ch in 0..di {
                let (dt, x) = (inp.delta[row + ch], inp.u[row + ch]);
                let r = ch * ns..(ch + 1) * ns;
                advance::<T, N>(dt, dt * x, t == 0, &a_g[r.clone()], bt, ct, &mut e[r.clone()], &mut h[r]);
            }
        }
        carry.iter_mut().for_each(|v| *v = T::zero());
        let da_g = &mut gr.da[gk * plane..(gk + 1) * plane];
        for t in (0..l).rev() {
            let row = (s * l + t) * di;
            let srow = (s * l + t) * ns;
            let (bt, ct) = (&inp.b[srow..srow + ns], &inp.c[srow..srow + ns]);
            let db_t = &mut gr.db[srow..srow + ns];
            let dc_t = &mut gr.dc[srow..srow + ns];
            for ch in 0..di {
                let (dt, x, gyv) = (inp.delta[row + ch], inp.u[row + ch], gy[row + ch]);
                let r = ch * ns..(ch + 1) * ns;
                let cur = t * plane + ch * ns;
                let h = &hs[cur..cur + ns];
                let hp = if t > 0 { &hs[cur - plane..cur - plane + ns] } else { h };
                let e = &das[cur..cur + ns];
                let (a_row, da_row, carry_row) = (&a_g[r.clone()], &mut da_g[r.clone()], &mut carry[r]);
                let dtx = dt * x;
                let mut acc_b = [T::zero(); N];
                let mut acc_a = [T::zero(); N];
                for q in (0..ns).step_by(N) {
                    let hc: &[T; N] = h[q..q + N].try_into().unwrap();
                    let hpc: &[T; N] = hp[q..q + N].try_into().unwrap();
                    let ec: &[T; N] = e[q..q + N].try_into().unwrap();
                    let ac: &[T; N] = a_row[q..q + N].try_into().unwrap();
                    let bc: &[T; N] = bt[q..q + N].try_into().unwrap();
                    let cc: &[T; N] = ct[q..q + N].try_into().unwrap();
                    let dbc: &mut [T; N] = (&mut db_t[q..q + N]).try_into().unwrap();
                    let dcc: &mut [T; N] = (&mut dc_t[q..q + N]).try_into().unwrap();
                    let dac: &mut [T; N] = (&mut da_row[q..q + N]).try_into().unwrap();
                    let crc: &mut [T; N] = (&mut carry_row[q..q + N]).try_into().unwrap();
                    let mut dh = [T::zero(); N];
                    for i in 0..N {
                        dh[i] = cc[i] * gyv + crc[i];
                        dcc[i] = dcc[i] + gyv * hc[i];
                        dbc[i] = dbc[i] + dtx * dh[i];
                        acc_b[i] = acc_b[i] + dh[i] * bc[i];
                    }
                    if t > 0 {
                        for i in 0..N {
                            let gd = dh[i] * hpc[i] * ec[i];
                            acc_a[i] = acc_a[i] + gd * ac[i];
                            dac[i] = dac[i] + dt * gd;
                            crc[i] = dh[i] * ec[i];
                        }
                    }
                }
                let dhb = lanes_sum(acc_b);
                gr.du[row + ch] = dhb * dt + gyv * inp.d[gk * di + ch];
                gr.ddelta[row + ch] = dhb * x + lanes_sum(acc_a);
                gr.dd[gk * di + ch] = gr.dd[gk * di + ch] + gyv * x;
            }
        }
    }
}
