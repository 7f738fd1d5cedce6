mod common;

use std::rc::Rc;

use aspvmunet::numerics::{GradCheck, Graph, Init, Mode, ParamStore, Scope, Tensor};
use aspvmunet::scan::{Direction, ScanSpec, StackOrder};
use aspvmunet::ssm::{selective_scan, AtrousMamba, AtrousMambaConfig, Mamba, MambaConfig};
use common::{probe_loss, rand_tensor, rng};
use proptest::prelude::*;
use rand::Rng;

/// Literal per-timestep recurrence, one (sequence, channel, state) at a time.
#[allow(clippy::too_many_arguments)]
fn naive_scan(
    u: &Tensor<f64>,
    delta: &Tensor<f64>,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    c: &Tensor<f64>,
    d: &Tensor<f64>,
    groups: &[usize],
) -> Tensor<f64> {
    let (n, l, di) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let ns = a.shape()[2];
    let mut y = Tensor::zeros(&[n, l, di]);
    for s in 0..n {
        let k = groups[s];
        for ch in 0..di {
            let mut h = vec![0.0; ns];
            for t in 0..l {
                let dt = delta.at(&[s, t, ch]);
                let x = u.at(&[s, t, ch]);
                let mut out = 0.0;
                for j in 0..ns {
                    h[j] = (dt * a.at(&[k, ch, j])).exp() * h[j] + dt * b.at(&[s, t, j]) * x;
                    out += c.at(&[s, t, j]) * h[j];
                }
                let off = y.offset(&[s, t, ch]);
                y.data_mut()[off] = out + d.at(&[k, ch]) * x;
            }
        }
    }
    y
}

struct Instance {
    u: Tensor<f64>,
    delta: Tensor<f64>,
    a: Tensor<f64>,
    b: Tensor<f64>,
    c: Tensor<f64>,
    d: Tensor<f64>,
    groups: Vec<usize>,
}

fn instance(seed: u64, n: usize, l: usize, di: usize, ns: usize, k: usize) -> Instance {
    let mut r = rng(seed);
    Instance {
        u: rand_tensor(&mut r, &[n, l, di], -1.0, 1.0),
        delta: rand_tensor(&mut r, &[n, l, di], 0.05, 1.0),
        a: rand_tensor(&mut r, &[k, di, ns], -2.0, -0.1),
        b: rand_tensor(&mut r, &[n, l, ns], -1.0, 1.0),
        c: rand_tensor(&mut r, &[n, l, ns], -1.0, 1.0),
        d: rand_tensor(&mut r, &[k, di], -1.0, 1.0),
        groups: (0..n).map(|_| r.gen_range(0..k)).collect(),
    }
}

fn run_scan(inst: &Instance) -> Tensor<f64> {
    let store = ParamStore::new();
    let g = Graph::new(&store, Mode::Eval);
    let y = selective_scan(
        &g,
        g.constant(inst.u.clone()),
        g.constant(inst.delta.clone()),
        g.constant(inst.a.clone()),
        g.constant(inst.b.clone()),
        g.constant(inst.c.clone()),
        g.constant(inst.d.clone()),
        Rc::new(inst.groups.clone()),
    )
    .unwrap();
    (*g.value(y)).clone()
}

#[test]
fn selective_scan_matches_loop_oracle() {
    let mut r = rng(11);
    for case in 0..100 {
        let (n, l, di, ns, k) = (r.gen_range(1..=2), r.gen_range(1..=8), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=3));
        let inst = instance(1000 + case, n, l, di, ns, k);
        let got = run_scan(&inst);
        let want = naive_scan(&inst.u, &inst.delta, &inst.a, &inst.b, &inst.c, &inst.d, &inst.groups);
        assert!(got.max_abs_diff(&want) < 1e-6, "case {case}: diff {}", got.max_abs_diff(&want));
    }
}

#[test]
fn zero_state_matrix_gives_weighted_prefix_sum() {
    let mut inst = instance(3, 1, 6, 1, 1, 1);
    inst.a = Tensor::zeros(&[1, 1, 1]);
    inst.b = Tensor::ones(&[1, 6, 1]);
    inst.c = Tensor::ones(&[1, 6, 1]);
    inst.d = Tensor::zeros(&[1, 1]);
    let y = run_scan(&inst);
    let mut acc = 0.0;
    for t in 0..6 {
        acc += inst.delta.data()[t] * inst.u.data()[t];
        assert!((y.data()[t] - acc).abs() < 1e-12);
    }
}

#[test]
fn single_step() {
    let inst = instance(4, 1, 1, 2, 3, 1);
    let y = run_scan(&inst);
    for ch in 0..2 {
        let (dt, x) = (inst.delta.data()[ch], inst.u.data()[ch]);
        let cb: f64 = (0..3).map(|j| inst.c.data()[j] * inst.b.data()[j]).sum();
        let want = cb * dt * x + inst.d.data()[ch] * x;
        assert!((y.data()[ch] - want).abs() < 1e-12);
    }
}

#[test]
fn non_finite_state_names_timestep() {
    let mut inst = instance(5, 1, 4, 1, 1, 1);
    inst.a = Tensor::full(&[1, 1, 1], 1e6);
    inst.delta = Tensor::ones(&[1, 4, 1]);
    let store = ParamStore::new();
    let g = Graph::new(&store, Mode::Eval);
    let err = selective_scan(
        &g,
        g.constant(inst.u.clone()),
        g.constant(inst.delta.clone()),
        g.constant(inst.a.clone()),
        g.constant(inst.b.clone()),
        g.constant(inst.c.clone()),
        g.constant(inst.d.clone()),
        Rc::new(inst.groups.clone()),
    )
    .unwrap_err();
    assert!(matches!(err, aspvmunet::Error::Numeric(ref m) if m.contains("timestep 1")), "{err}");
}

#[test]
fn selective_scan_gradients() {
    let inst = instance(6, 2, 5, 3, 4, 2);
    let mut store = ParamStore::new();
    let ids: Vec<_> = [&inst.u, &inst.delta, &inst.a, &inst.b, &inst.c, &inst.d]
        .iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("p{i}"), (*t).clone()).unwrap())
        .collect();
    let groups = Rc::new(inst.groups.clone());
    let report = GradCheck::default()
        .run(&mut store, |g| {
            let p: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
            let y = selective_scan(g, p[0], p[1], p[2], p[3], p[4], p[5], Rc::clone(&groups))?;
            probe_loss(g, y, 1)
        })
        .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

fn small_mamba(store: &mut ParamStore<f64>, d: usize, seed: u64) -> Mamba {
    Mamba::new(store, &Scope::new("m"), MambaConfig::new(d), &mut Init::new(seed)).unwrap()
}

#[test]
fn mamba_preserves_shape() {
    for (n, l, d) in [(1, 1, 4), (2, 5, 8), (3, 7, 6)] {
        let mut store = ParamStore::<f64>::new();
        let m = small_mamba(&mut store, d, 1);
        let g = Graph::new(&store, Mode::Eval);
        let x = g.constant(rand_tensor(&mut rng(2), &[n, l, d], -1.0, 1.0));
        let y = m.forward(&g, x).unwrap();
        assert_eq!(g.shape(y), vec![n, l, d]);
    }
}

#[test]
fn mamba_rejects_wrong_width() {
    let mut store = ParamStore::<f64>::new();
    let m = small_mamba(&mut store, 8, 1);
    let g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 3, 6]));
    assert!(matches!(m.forward(&g, x), Err(aspvmunet::Error::Dimension(_))));
}

#[test]
fn mamba_zero_input_zero_output() {
    let mut store = ParamStore::<f64>::new();
    let m = small_mamba(&mut store, 8, 1);
    let bias = store.find("m.conv1d.bias").unwrap();
    store.set_value(bias, Tensor::zeros(&[16])).unwrap();
    let g = Graph::new(&store, Mode::Eval);
    let y = m.forward(&g, g.constant(Tensor::zeros(&[2, 5, 8]))).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mamba_gradients() {
    let mut store = ParamStore::<f64>::new();
    let m = small_mamba(&mut store, 8, 3);
    let x = rand_tensor(&mut rng(4), &[1, 4, 8], -1.0, 1.0);
    let report = GradCheck::default()
        .run(&mut store, |g| {
            let y = m.forward(g, g.constant(x.clone()))?;
            probe_loss(g, y, 5)
        })
        .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn mamba_param_count_matches_registry() {
    for d in [4, 8, 24, 96, 384] {
        for k in [1, 4, 9] {
            let cfg = MambaConfig::new(d).with_groups(k);
            let mut store = ParamStore::<f32>::new();
            Mamba::new(&mut store, &Scope::new("m"), cfg.clone(), &mut Init::new(0)).unwrap();
            assert_eq!(store.count(), cfg.param_count());
        }
    }
}

#[test]
fn state_decay_is_contractive() {
    let mut store = ParamStore::<f64>::new();
    small_mamba(&mut store, 8, 9);
    let a_log = store.param(store.find("m.A_log").unwrap()).value.clone();
    let bias = store.param(store.find("m.dt_proj.bias").unwrap()).value.clone();
    for &al in a_log.data() {
        for &b in bias.data() {
            let dt = aspvmunet::numerics::ops::softplus(b);
            assert!(dt > 0.0);
            assert!((dt * -al.exp()).exp() < 1.0);
        }
    }
    for &b in bias.data() {
        let dt = aspvmunet::numerics::ops::softplus(b);
        assert!((1e-3 - 1e-9..=0.1 + 1e-9).contains(&dt));
    }
}

fn atrous(store: &mut ParamStore<f64>, d: usize, scan: ScanSpec, order: StackOrder, seed: u64) -> AtrousMamba {
    let mut cfg = AtrousMambaConfig::new(d, scan);
    cfg.stack_order = order;
    AtrousMamba::new(store, &Scope::new("am"), cfg, &mut Init::new(seed)).unwrap()
}

fn run_atrous(store: &ParamStore<f64>, m: &AtrousMamba, x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let g = Graph::new(store, Mode::Eval);
    let y = m.forward(&g, g.constant(x.clone()), h, w).unwrap();
    (*g.value(y)).clone()
}

#[test]
fn atrous_step_one_is_plain_mamba() {
    let mut s1 = ParamStore::new();
    let am = atrous(&mut s1, 8, ScanSpec::atrous(1), StackOrder::BatchMajor, 7);
    let mut s2 = ParamStore::new();
    let m = Mamba::new(&mut s2, &Scope::new("am"), MambaConfig::new(8), &mut Init::new(7)).unwrap();
    let x = rand_tensor(&mut rng(8), &[2, 12, 8], -1.0, 1.0);
    let a = run_atrous(&s1, &am, &x, 3, 4);
    let g = Graph::new(&s2, Mode::Eval);
    let b = g.value(m.forward(&g, g.constant(x)).unwrap());
    assert_eq!(a.data(), b.data());
}

#[test]
fn stacking_order_is_invisible() {
    for scan in [ScanSpec::atrous(2), ScanSpec::atrous(3), ScanSpec::across(2), ScanSpec::efficient()] {
        let mut s1 = ParamStore::new();
        let a = atrous(&mut s1, 4, scan.clone(), StackOrder::BatchMajor, 1);
        let mut s2 = ParamStore::new();
        let b = atrous(&mut s2, 4, scan.clone(), StackOrder::SequenceMajor, 1);
        let x = rand_tensor(&mut rng(2), &[3, 35, 4], -1.0, 1.0);
        assert_eq!(run_atrous(&s1, &a, &x, 5, 7).data(), run_atrous(&s2, &b, &x, 5, 7).data(), "{scan:?}");
    }
}

#[test]
fn batch_elements_do_not_mix() {
    let mut store = ParamStore::new();
    let m = atrous(&mut store, 4, ScanSpec::atrous(2), StackOrder::BatchMajor, 1);
    let x = rand_tensor(&mut rng(3), &[3, 16, 4], -1.0, 1.0);
    let y = run_atrous(&store, &m, &x, 4, 4);
    let perm = [2, 0, 1];
    let row = 16 * 4;
    let xp = Tensor::from_fn(&[3, 16, 4], |i| x.data()[perm[i / row] * row + i % row]);
    let yp = run_atrous(&store, &m, &xp, 4, 4);
    for (bi, &src) in perm.iter().enumerate() {
        assert_eq!(&yp.data()[bi * row..(bi + 1) * row], &y.data()[src * row..(src + 1) * row]);
    }
}

#[test]
fn atrous_param_growth_is_per_sequence_bundles() {
    let count = |s: usize| AtrousMambaConfig::new(96, ScanSpec::atrous(s)).param_count();
    let bundle = count(2) - count(1);
    assert!(bundle > 0);
    for s in [1usize, 2, 3, 4, 8] {
        assert_eq!(count(s), count(1) + (s * s - 1) * bundle / 3);
    }
    // across at S=1 has as many sequences as atrous at S=2
    assert_eq!(AtrousMambaConfig::new(96, ScanSpec::across(1)).param_count(), count(2));
    assert_eq!(AtrousMambaConfig::new(96, ScanSpec::across(2)).param_count(), count(4));
    assert_eq!(AtrousMambaConfig::new(96, ScanSpec::efficient()).param_count(), count(2));
}

/// Copies bundle 0 into every other bundle.
fn tie_bundles(store: &mut ParamStore<f64>, prefix: &str) {
    for leaf in ["x_proj.weight", "dt_proj.weight", "dt_proj.bias", "A_log", "D"] {
        let id = store.find(&format!("{prefix}.{leaf}")).unwrap();
        let v = store.param(id).value.clone();
        let k = v.shape()[0];
        let per = v.numel() / k;
        let tied = Tensor::from_fn(v.shape(), |i| v.data()[i % per]);
        store.set_value(id, tied).unwrap();
    }
}

#[test]
fn across_on_single_cell_is_four_times_one_direction() {
    let mut s4 = ParamStore::new();
    let across = atrous(&mut s4, 4, ScanSpec::across(1), StackOrder::BatchMajor, 5);
    tie_bundles(&mut s4, "am");
    let mut s1 = ParamStore::new();
    let single = atrous(&mut s1, 4, ScanSpec::atrous(1), StackOrder::BatchMajor, 5);
    // same weights as bundle 0 of the four-direction core
    for id in s1.ids().collect::<Vec<_>>() {
        let src = &s4.param(s4.find(&s1.param(id).name).unwrap()).value;
        let n = s1.param(id).value.numel();
        let v = Tensor::new(s1.param(id).value.shape(), src.data()[..n].to_vec()).unwrap();
        s1.set_value(id, v).unwrap();
    }
    let x = rand_tensor(&mut rng(6), &[2, 1, 4], -1.0, 1.0);
    let a = run_atrous(&s4, &across, &x, 1, 1);
    let b = run_atrous(&s1, &single, &x, 1, 1);
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - 4.0 * q).abs() < 1e-12);
    }
}

#[test]
fn mirrored_input_gives_mirrored_output_under_tied_weights() {
    let spec = ScanSpec {
        sampling: aspvmunet::scan::Sampling::Global,
        directions: vec![Direction::TopLeftHorizontal, Direction::TopRightHorizontal],
        per_subimage_directions: None,
    };
    let mut store = ParamStore::new();
    let m = atrous(&mut store, 4, spec, StackOrder::BatchMajor, 2);
    tie_bundles(&mut store, "am");
    let (h, w, c) = (2, 3, 4);
    let x = rand_tensor(&mut rng(9), &[1, h * w, c], -1.0, 1.0);
    let mirror = |t: &Tensor<f64>| {
        Tensor::from_fn(&[1, h * w, c], |i| {
            let (p, ch) = (i / c, i % c);
            let (r, col) = (p / w, p % w);
            t.data()[(r * w + (w - 1 - col)) * c + ch]
        })
    };
    let y = run_atrous(&store, &m, &x, h, w);
    let ym = run_atrous(&store, &m, &mirror(&x), h, w);
    assert!(mirror(&y).max_abs_diff(&ym) < 1e-12);
}

#[test]
fn atrous_mamba_gradients() {
    for scan in [ScanSpec::atrous(2), ScanSpec::across(1), ScanSpec::efficient()] {
        let mut store = ParamStore::new();
        let m = atrous(&mut store, 4, scan, StackOrder::BatchMajor, 3);
        let x = rand_tensor(&mut rng(4), &[1, 9, 4], -1.0, 1.0);
        let report = GradCheck::default()
            .run(&mut store, |g| {
                let y = m.forward(g, g.constant(x.clone()), 3, 3)?;
                probe_loss(g, y, 5)
            })
            .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scan_is_causal(seed in 0u64..1000, l in 2usize..8, cut in 0usize..7) {
        let cut = cut % (l - 1);
        let inst = instance(seed, 1, l, 3, 2, 1);
        let full = run_scan(&inst);
        let mut trunc = Instance { u: inst.u.clone(), ..instance(seed, 1, l, 3, 2, 1) };
        for t in cut + 1..l {
            for ch in 0..3 {
                let off = trunc.u.offset(&[0, t, ch]);
                trunc.u.data_mut()[off] = 0.0;
            }
        }
        let part = run_scan(&trunc);
        let keep = (cut + 1) * 3;
        prop_assert_eq!(&full.data()[..keep], &part.data()[..keep]);
    }
}
