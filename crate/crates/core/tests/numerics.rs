mod common;

use std::rc::Rc;

use aspvmunet::numerics::{Conv2dOpts, GradCheck, Graph, Mode, ParamStore, Tensor, Var};
use aspvmunet::{Error, Result};
use common::{probe_loss, rand_tensor, rng};
use proptest::prelude::*;

fn eval<F>(inputs: &[Tensor<f64>], f: F) -> Tensor<f64>
where
    F: for<'g> Fn(&Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    let g = Graph::new(&store, Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars).unwrap();
    (*g.value(out)).clone()
}

/// Registers every input as a parameter and finite-difference checks the
/// gradient of a random projection of `f`'s output.
fn check_grad<F>(inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: for<'g> Fn(&Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("in{i}"), t).unwrap())
        .collect();
    let report = GradCheck::default()
        .run(&mut store, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let y = f(g, &vars)?;
            probe_loss(g, y, 99)
        })
        .unwrap();
    assert!(report.checked > 0);
    report.max_rel_err
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d}");
}

fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, o: Conv2dOpts) -> Tensor<f64> {
    let (bn, _, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * o.padding.0 - o.dilation * (kh - 1) - 1) / o.stride + 1;
    let wo = (wd + 2 * o.padding.1 - o.dilation * (kw - 1) - 1) / o.stride + 1;
    let cout_g = cout / o.groups;
    let mut out = Tensor::zeros(&[bn, cout, ho, wo]);
    for n in 0..bn {
        for oc in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for icg in 0..cin_g {
                        let ic = (oc / cout_g) * cin_g + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * o.stride + ky * o.dilation) as isize - o.padding.0 as isize;
                                let ix = (ox * o.stride + kx * o.dilation) as isize - o.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[oc, icg, ky, kx]) * x.at(&[n, ic, iy as usize, ix as usize]);
                            }
                        }
                    }
                    let off = out.offset(&[n, oc, oy, ox]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

fn conv_cases() -> Vec<(usize, usize, usize, usize, Conv2dOpts)> {
    // (cin, cout, k, hw, opts)
    let o = |stride, pad: (usize, usize), dilation, groups| Conv2dOpts { stride, padding: pad, dilation, groups };
    vec![
        (3, 4, 3, 7, o(1, (1, 1), 1, 1)),
        (4, 6, 1, 5, o(1, (0, 0), 1, 1)),
        (4, 4, 3, 6, o(1, (1, 1), 1, 4)),
        (4, 6, 3, 8, o(2, (1, 0), 1, 2)),
        (2, 1, 7, 9, o(1, (9, 9), 3, 1)),
        (2, 3, 3, 6, o(1, (0, 2), 2, 1)),
        (1, 1, 3, 1, o(1, (1, 1), 1, 1)),
    ]
}

#[test]
fn conv2d_matches_naive_oracle() {
    let mut r = rng(1);
    for (cin, cout, k, hw, opts) in conv_cases() {
        let x = rand_tensor(&mut r, &[2, cin, hw, hw + 1], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[cout, cin / opts.groups, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[cout], -1.0, 1.0);
        let got = eval(&[x.clone(), w.clone(), b.clone()], |g, v| g.conv2d(v[0], v[1], Some(v[2]), opts));
        close(&got, &naive_conv2d(&x, &w, Some(&b), opts), 1e-12);
        let got = eval(&[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], None, opts));
        close(&got, &naive_conv2d(&x, &w, None, opts), 1e-12);
    }
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(2);
    for (cin, cout, k, hw, opts) in conv_cases() {
        let x = rand_tensor(&mut r, &[2, cin, hw, hw + 1], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[cout, cin / opts.groups, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[cout], -1.0, 1.0);
        let err = check_grad(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), opts));
        assert!(err < 1e-6, "{opts:?}: {err}");
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
    let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
    let store = ParamStore::new();
    let g = Graph::new(&store, Mode::Eval);
    let (x, w) = (g.constant(x), g.constant(w));
    assert!(matches!(g.conv2d(x, w, None, Conv2dOpts::default()), Err(Error::Dimension(_))));
}

#[test]
fn conv1d_causal_matches_oracle_and_gradients() {
    let mut r = rng(3);
    let (n, l, c, k) = (2, 6, 3, 4);
    let x = rand_tensor(&mut r, &[n, l, c], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[c, k], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[c], -1.0, 1.0);
    let got = eval(&[x.clone(), w.clone(), b.clone()], |g, v| g.conv1d_causal(v[0], v[1], v[2]));
    for s in 0..n {
        for t in 0..l {
            for ch in 0..c {
                let mut want = b.data()[ch];
                for j in 0..k {
                    if t + j + 1 >= k {
                        want += w.at(&[ch, j]) * x.at(&[s, t + j + 1 - k, ch]);
                    }
                }
                assert!((got.at(&[s, t, ch]) - want).abs() < 1e-12);
            }
        }
    }
    assert!(check_grad(vec![x, w, b], |g, v| g.conv1d_causal(v[0], v[1], v[2])) < 1e-6);
}

#[test]
fn linear_family_matches_oracle() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[3, 4, 5], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[6, 5], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[6], -1.0, 1.0);
    let got = eval(&[x.clone(), w.clone(), b.clone()], |g, v| g.linear(v[0], v[1], Some(v[2])));
    assert_eq!(got.shape(), &[3, 4, 6]);
    for i in 0..3 {
        for j in 0..4 {
            for o in 0..6 {
                let want: f64 = b.data()[o] + (0..5).map(|t| x.at(&[i, j, t]) * w.at(&[o, t])).sum::<f64>();
                assert!((got.at(&[i, j, o]) - want).abs() < 1e-12);
            }
        }
    }

    let wg = rand_tensor(&mut r, &[2, 6, 5], -1.0, 1.0);
    let bg = rand_tensor(&mut r, &[2, 6], -1.0, 1.0);
    let groups = Rc::new(vec![1, 0, 1]);
    let gr = groups.clone();
    let got = eval(&[x.clone(), wg.clone(), bg.clone()], move |g, v| {
        g.grouped_linear(v[0], v[1], Some(v[2]), gr.clone())
    });
    for i in 0..3 {
        let k = groups[i];
        for j in 0..4 {
            for o in 0..6 {
                let want: f64 = bg.at(&[k, o]) + (0..5).map(|t| x.at(&[i, j, t]) * wg.at(&[k, o, t])).sum::<f64>();
                assert!((got.at(&[i, j, o]) - want).abs() < 1e-12);
            }
        }
    }

    let a = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let m = rand_tensor(&mut r, &[2, 4, 5], -1.0, 1.0);
    let got = eval(&[a.clone(), m.clone()], |g, v| g.matmul(v[0], v[1]));
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|t| a.at(&[bi, i, t]) * m.at(&[bi, t, j])).sum();
                assert!((got.at(&[bi, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn linear_family_gradients() {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, &[3, 4, 5], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[6, 5], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[6], -1.0, 1.0);
    assert!(check_grad(vec![x.clone(), w, b], |g, v| g.linear(v[0], v[1], Some(v[2]))) < 1e-6);
    let wg = rand_tensor(&mut r, &[2, 6, 5], -1.0, 1.0);
    let bg = rand_tensor(&mut r, &[2, 6], -1.0, 1.0);
    let groups = Rc::new(vec![1, 0, 1]);
    let err = check_grad(vec![x, wg, bg], move |g, v| g.grouped_linear(v[0], v[1], Some(v[2]), groups.clone()));
    assert!(err < 1e-6);
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let m = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
    assert!(check_grad(vec![a, m], |g, v| g.matmul(v[0], v[1])) < 1e-6);
}

#[test]
fn layer_norm_matches_oracle_and_gradients() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[3, 2, 7], -2.0, 2.0);
    let gamma = rand_tensor(&mut r, &[7], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[7], -0.5, 0.5);
    let got = eval(&[x.clone(), gamma.clone(), beta.clone()], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    for row in 0..6 {
        let xs = &x.data()[row * 7..(row + 1) * 7];
        let mean = xs.iter().sum::<f64>() / 7.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for c in 0..7 {
            let want = (xs[c] - mean) / (var + 1e-5).sqrt() * gamma.data()[c] + beta.data()[c];
            assert!((got.data()[row * 7 + c] - want).abs() < 1e-12);
        }
    }
    assert!(check_grad(vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)) < 1e-6);
}

#[test]
fn batch_norm_uses_batch_stats_in_training_and_running_stats_in_eval() {
    let mut r = rng(7);
    let x = rand_tensor::<f64>(&mut r, &[2, 3, 4, 5], -2.0, 3.0);
    let mut store = ParamStore::new();
    let gamma = store.register("gamma", Tensor::full(&[3], 2.0)).unwrap();
    let beta = store.register("beta", Tensor::full(&[3], 0.5)).unwrap();
    let rm = store.register_buffer("mean", Tensor::zeros(&[3])).unwrap();
    let rv = store.register_buffer("var", Tensor::ones(&[3])).unwrap();
    let (out, updates) = {
        let g = Graph::new(&store, Mode::Train);
        let xv = g.constant(x.clone());
        let y = g.batch_norm2d(xv, g.param(gamma), g.param(beta), rm, rv, 1e-5).unwrap();
        ((*g.value(y)).clone(), g.take_buffer_updates())
    };
    for ch in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|b| (0..20).map(move |p| (b, p)))
            .map(|(b, p)| x.data()[(b * 3 + ch) * 20 + p])
            .collect();
        let mean = vals.iter().sum::<f64>() / 40.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
        for b in 0..2 {
            for p in 0..20 {
                let i = (b * 3 + ch) * 20 + p;
                let want = 2.0 * (x.data()[i] - mean) / (var + 1e-5).sqrt() + 0.5;
                assert!((out.data()[i] - want).abs() < 1e-12);
            }
        }
        let (_, new_mean) = updates.iter().find(|(id, _)| *id == rm).unwrap();
        assert!((new_mean.data()[ch] - 0.1 * mean).abs() < 1e-12);
        let (_, new_var) = updates.iter().find(|(id, _)| *id == rv).unwrap();
        // running variance tracks the unbiased estimate
        assert!((new_var.data()[ch] - (0.9 + 0.1 * var * 40.0 / 39.0)).abs() < 1e-12);
    }
    store.apply_buffer_updates(updates);
    let g = Graph::new(&store, Mode::Eval);
    let y = g.batch_norm2d(g.constant(x.clone()), g.param(gamma), g.param(beta), rm, rv, 1e-5).unwrap();
    let mean = store.buffer(rm).value.clone();
    let var = store.buffer(rv).value.clone();
    let i = (3 + 1) * 20 + 7;
    let want = 2.0 * (x.data()[i] - mean.data()[1]) / (var.data()[1] + 1e-5).sqrt() + 0.5;
    assert!((g.value(y).data()[i] - want).abs() < 1e-12);
}

#[test]
fn batch_norm_gradients() {
    let mut r = rng(8);
    let x = rand_tensor::<f64>(&mut r, &[2, 3, 3, 2], -2.0, 2.0);
    let mut store = ParamStore::new();
    let xi = store.register("x", x).unwrap();
    let gamma = store.register("gamma", rand_tensor(&mut r, &[3], 0.5, 1.5)).unwrap();
    let beta = store.register("beta", rand_tensor(&mut r, &[3], -0.5, 0.5)).unwrap();
    let rm = store.register_buffer("mean", Tensor::zeros(&[3])).unwrap();
    let rv = store.register_buffer("var", Tensor::ones(&[3])).unwrap();
    let report = GradCheck::default()
        .run(&mut store, |g| {
            let y = g.batch_norm2d(g.param(xi), g.param(gamma), g.param(beta), rm, rv, 1e-5)?;
            probe_loss(g, y, 3)
        })
        .unwrap();
    assert!(report.max_rel_err < 1e-6, "{}", report.worst);
}

#[test]
fn softmax_is_a_distribution_and_differentiable() {
    let mut r = rng(9);
    let x = rand_tensor(&mut r, &[2, 3, 4], -3.0, 3.0);
    for axis in 0..3 {
        let got = eval(&[x.clone()], |g, v| g.softmax(v[0], axis));
        let shape = x.shape();
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    let idx = [i, j, k];
                    let denom: f64 = (0..shape[axis])
                        .map(|t| {
                            let mut q = idx;
                            q[axis] = t;
                            x.at(&q).exp()
                        })
                        .sum();
                    assert!((got.at(&idx) - x.at(&idx).exp() / denom).abs() < 1e-12);
                }
            }
        }
        assert!(check_grad(vec![x.clone()], |g, v| g.softmax(v[0], axis)) < 1e-6);
    }
    // large logits stay finite
    let big = Tensor::new(&[1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
    let got = eval(&[big], |g, v| g.softmax(v[0], 1));
    assert!(got.is_finite() && (got.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn pooling_and_reductions_match_oracles() {
    let mut r = rng(10);
    let x = rand_tensor(&mut r, &[2, 3, 4, 6], -1.0, 1.0);
    let mp = eval(&[x.clone()], |g, v| g.max_pool2x2(v[0]));
    let gap = eval(&[x.clone()], |g, v| g.global_avg_pool(v[0]));
    let mx = eval(&[x.clone()], |g, v| g.max_axis(v[0], 1));
    let mean = eval(&[x.clone()], |g, v| g.mean_axis(v[0], 3));
    assert_eq!(mp.shape(), &[2, 3, 2, 3]);
    for b in 0..2 {
        for c in 0..3 {
            let mut s = 0.0;
            for y in 0..4 {
                for xx in 0..6 {
                    s += x.at(&[b, c, y, xx]);
                }
                let row: f64 = (0..6).map(|xx| x.at(&[b, c, y, xx])).sum();
                assert!((mean.at(&[b, c, y]) - row / 6.0).abs() < 1e-12);
            }
            assert!((gap.at(&[b, c]) - s / 24.0).abs() < 1e-12);
            for oy in 0..2 {
                for ox in 0..3 {
                    let want = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(&[b, c, 2 * oy + dy, 2 * ox + dx]))
                        .fold(f64::MIN, f64::max);
                    assert_eq!(mp.at(&[b, c, oy, ox]), want);
                }
            }
        }
        for y in 0..4 {
            for xx in 0..6 {
                let want = (0..3).map(|c| x.at(&[b, c, y, xx])).fold(f64::MIN, f64::max);
                assert_eq!(mx.at(&[b, y, xx]), want);
            }
        }
    }
    assert!(check_grad(vec![x.clone()], |g, v| g.max_pool2x2(v[0])) < 1e-6);
    assert!(check_grad(vec![x.clone()], |g, v| g.global_avg_pool(v[0])) < 1e-6);
    assert!(check_grad(vec![x.clone()], |g, v| g.max_axis(v[0], 1)) < 1e-6);
    assert!(check_grad(vec![x], |g, v| g.mean_axis(v[0], 3)) < 1e-6);
}

#[test]
fn bilinear_upsample_matches_half_pixel_oracle() {
    let mut r = rng(11);
    let x = rand_tensor(&mut r, &[1, 2, 3, 4], -1.0, 1.0);
    let up = eval(&[x.clone()], |g, v| g.upsample_bilinear2x(v[0]));
    assert_eq!(up.shape(), &[1, 2, 6, 8]);
    let sample = |c: usize, sy: f64, sx: f64| {
        let clampi = |v: f64, n: usize| (v.max(0.0).floor() as usize).min(n - 1);
        let (y0, x0) = (clampi(sy, 3), clampi(sx, 4));
        let (y1, x1) = ((y0 + 1).min(2), (x0 + 1).min(3));
        let (fy, fx) = (sy.max(0.0) - y0 as f64, sx.max(0.0) - x0 as f64);
        let p = |y, xx| x.at(&[0, c, y, xx]);
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    };
    for c in 0..2 {
        for oy in 0..6 {
            for ox in 0..8 {
                let want = sample(c, (oy as f64 + 0.5) / 2.0 - 0.5, (ox as f64 + 0.5) / 2.0 - 0.5);
                assert!((up.at(&[0, c, oy, ox]) - want).abs() < 1e-12);
            }
        }
    }
    // a constant image stays constant
    let ones = eval(&[Tensor::ones(&[1, 1, 3, 3])], |g, v| g.upsample_bilinear2x(v[0]));
    assert!(ones.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    assert!(check_grad(vec![x], |g, v| g.upsample_bilinear2x(v[0])) < 1e-6);
}

#[test]
fn elementwise_ops_match_closed_forms_and_gradients() {
    let mut r = rng(12);
    let x = rand_tensor(&mut r, &[4, 5], -4.0, 4.0);
    let pos = rand_tensor(&mut r, &[4, 5], 0.1, 3.0);
    type Op = (&'static str, fn(f64) -> f64);
    let cases: Vec<Op> = vec![
        ("sigmoid", |v| 1.0 / (1.0 + (-v).exp())),
        ("silu", |v| v / (1.0 + (-v).exp())),
        ("gelu", |v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()))),
        ("softplus", |v| (1.0 + v.exp()).ln()),
        ("exp", f64::exp),
        ("neg", |v| -v),
    ];
    for (name, f) in cases {
        let apply = move |g: &Graph<'_, f64>, v: Var| match name {
            "sigmoid" => g.sigmoid(v),
            "silu" => g.silu(v),
            "gelu" => g.gelu(v),
            "softplus" => g.softplus(v),
            "exp" => g.exp(v),
            _ => g.neg(v),
        };
        let got = eval(&[x.clone()], |g, v| apply(g, v[0]));
        for (a, &b) in got.data().iter().zip(x.data()) {
            assert!((a - f(b)).abs() < 1e-12 * f(b).abs().max(1.0), "{name}");
        }
        assert!(check_grad(vec![x.clone()], |g, v| apply(g, v[0])) < 1e-6, "{name}");
    }
    let got = eval(&[pos.clone()], |g, v| g.log(v[0]));
    assert!(got.data().iter().zip(pos.data()).all(|(a, b)| (a - b.ln()).abs() < 1e-12));
    assert!(check_grad(vec![pos.clone()], |g, v| g.log(v[0])) < 1e-6);
    // relu is not differentiable at 0; inputs stay away from it
    assert!(check_grad(vec![pos.clone()], |g, v| g.relu(v[0])) < 1e-6);
    let nx = pos.map(|v| -v);
    assert!(check_grad(vec![nx], |g, v| g.relu(v[0])) < 1e-6);

    let y = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
    let s = rand_tensor(&mut r, &[4, 1], -1.0, 1.0);
    let one = rand_tensor(&mut r, &[1], -1.0, 1.0);
    assert!(check_grad(vec![x.clone(), y.clone()], |g, v| g.add(v[0], v[1])) < 1e-6);
    assert!(check_grad(vec![x.clone(), y.clone()], |g, v| g.sub(v[0], v[1])) < 1e-6);
    assert!(check_grad(vec![x.clone(), y.clone()], |g, v| g.mul(v[0], v[1])) < 1e-6);
    assert!(check_grad(vec![x.clone(), s.clone()], |g, v| g.mul_bcast(v[0], v[1])) < 1e-6);
    assert!(check_grad(vec![x.clone(), s.clone()], |g, v| g.add_bcast(v[0], v[1])) < 1e-6);
    assert!(check_grad(vec![x.clone(), one], |g, v| g.mul_scalar_var(v[0], v[1])) < 1e-6);
    assert!(check_grad(vec![x.clone()], |g, v| g.mean_all(v[0])) < 1e-6);
    let got = eval(&[x.clone(), s.clone()], |g, v| g.mul_bcast(v[0], v[1]));
    for i in 0..4 {
        for j in 0..5 {
            assert_eq!(got.at(&[i, j]), x.at(&[i, j]) * s.at(&[i, 0]));
        }
    }
}

#[test]
fn non_finite_outputs_are_rejected() {
    let x = Tensor::new(&[2], vec![1.0, 800.0]).unwrap();
    let store = ParamStore::new();
    let g = Graph::new(&store, Mode::Eval);
    let v = g.constant(x);
    assert!(matches!(g.exp(v), Err(Error::Numeric(_))));
}

#[test]
fn shape_ops_round_trip_and_gradients() {
    let mut r = rng(13);
    let x = rand_tensor(&mut r, &[2, 6, 3], -1.0, 1.0);
    let back = eval(&[x.clone()], |g, v| {
        let parts = g.chunk(v[0], 3, 1)?;
        g.concat(&parts, 1)
    });
    assert_eq!(back, x);
    let back = eval(&[x.clone()], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        g.permute(p, &[1, 2, 0])
    });
    assert_eq!(back, x);
    let p = eval(&[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    assert_eq!(p.at(&[1, 0, 4]), x.at(&[0, 4, 1]));
    let t = eval(&[x.clone()], |g, v| g.transpose_last(v[0]));
    assert_eq!(t.at(&[1, 2, 5]), x.at(&[1, 5, 2]));
    let n = eval(&[x.clone()], |g, v| g.narrow(v[0], 1, 2, 3));
    assert_eq!(n.shape(), &[2, 3, 3]);
    assert_eq!(n.at(&[1, 0, 2]), x.at(&[1, 2, 2]));
    assert!(check_grad(vec![x.clone()], |g, v| g.narrow(v[0], 1, 2, 3)) < 1e-6);
    assert!(check_grad(vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1])) < 1e-6);
    assert!(check_grad(vec![x.clone()], |g, v| g.reshape(v[0], &[6, 6])) < 1e-6);
    assert!(check_grad(vec![x.clone(), x.clone()], |g, v| g.concat(&[v[0], v[1]], 2)) < 1e-6);

    let idx = Rc::new(vec![Some(3), None, Some(0), Some(3)]);
    let i2 = idx.clone();
    let gathered = eval(&[x.clone()], move |g, v| g.gather_rows(v[0], 3, i2.clone(), &[4, 3]));
    assert_eq!(&gathered.data()[0..3], &x.data()[9..12]);
    assert_eq!(&gathered.data()[3..6], &[0.0; 3]);
    assert!(check_grad(vec![x], move |g, v| g.gather_rows(v[0], 3, idx.clone(), &[4, 3])) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_is_additive_in_its_input(seed in 0u64..1000, rows in 1usize..5, din in 1usize..9, dout in 1usize..9) {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, &[rows, din], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[rows, din], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[dout, din], -1.0, 1.0);
        let lin = |x: &Tensor<f64>| eval(&[x.clone(), w.clone()], |g, v| g.linear(v[0], v[1], None));
        let sum = Tensor::from_fn(&[rows, din], |i| a.data()[i] + b.data()[i]);
        let lhs = lin(&sum);
        let (la, lb) = (lin(&a), lin(&b));
        let rhs = Tensor::from_fn(&[rows, dout], |i| la.data()[i] + lb.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn conv2d_with_unit_kernel_is_identity(seed in 0u64..1000, c in 1usize..4, h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[1, c, h, w], -1.0, 1.0);
        let k = Tensor::from_fn(&[c, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let opts = Conv2dOpts { groups: c, ..Conv2dOpts::same(3) };
        let y = eval(&[x.clone(), k], |g, v| g.conv2d(v[0], v[1], None, opts));
        prop_assert_eq!(y, x);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, n in 1usize..9) {
        let x = rand_tensor(&mut rng(seed), &[3, n], -20.0, 20.0);
        let y = eval(&[x], |g, v| g.softmax(v[0], 1));
        for row in y.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
