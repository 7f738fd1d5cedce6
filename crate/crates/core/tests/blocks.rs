mod common;

use aspvmunet::blocks::{
    rotate_channels, shift_round, shift_round_back, AspBlock, BlockConfig, BlockFlags, CnnBranch, Pvm, PvmKind,
    SeBlock, SkBlock,
};
use aspvmunet::numerics::{GradCheck, Graph, Init, Mode, ParamStore, Scope, Tensor, Var};
use aspvmunet::ssm::CoreKind;
use aspvmunet::{Error, Result};
use common::{probe_loss, rand_tensor, rng};
use proptest::prelude::*;

fn ramp(b: usize, l: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[b, l, c], |i| i as f64)
}

#[test]
fn shift_round_rotates_left_by_an_eighth() {
    for c in [8, 16, 32, 384] {
        let store = ParamStore::<f64>::new();
        let g = Graph::new(&store, Mode::Eval);
        let x = g.constant(ramp(2, 3, c));
        let y = g.value(shift_round(&g, x).unwrap());
        let e = c / 8;
        for t in 0..6 {
            for i in 0..c {
                assert_eq!(y.data()[t * c + i], (t * c + (i + e) % c) as f64);
            }
        }
        // segment k of the rotated tensor is [Y(2k+2), Y(2k+3)] in 1-based eighths
        let segs: Vec<Vec<usize>> = (0..4)
            .map(|k| (0..c / 4).map(|j| y.data()[k * c / 4 + j] as usize / e).collect())
            .collect();
        for (k, s) in segs.iter().enumerate() {
            assert!(s[..e].iter().all(|&v| v == (2 * k + 1) % 8));
            assert!(s[e..].iter().all(|&v| v == (2 * k + 2) % 8));
        }
        let back = g.value(shift_round_back(&g, g.constant((*y).clone())).unwrap());
        assert_eq!(back.data(), g.value(x).data());
        let mut z = x;
        for _ in 0..8 {
            z = shift_round(&g, z).unwrap();
        }
        assert_eq!(g.value(z).data(), g.value(x).data());
    }
}

#[test]
fn shift_round_rejects_channels_not_divisible_by_eight() {
    let store = ParamStore::<f64>::new();
    let g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 2, 12]));
    assert!(matches!(shift_round(&g, x), Err(Error::Config(_))));
    assert!(matches!(shift_round_back(&g, x), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn shift_round_inverse_is_bit_exact(eighth in 1usize..8, l in 1usize..5, seed in any::<u64>()) {
        let c = 8 * eighth;
        let store = ParamStore::<f64>::new();
        let g = Graph::new(&store, Mode::Eval);
        let t = rand_tensor::<f64>(&mut rng(seed), &[2, l, c], -1e3, 1e3);
        let x = g.constant(t.clone());
        let fwd = shift_round_back(&g, shift_round(&g, x).unwrap()).unwrap();
        let bwd = shift_round(&g, shift_round_back(&g, x).unwrap()).unwrap();
        let (fwd, bwd) = (g.value(fwd), g.value(bwd));
        prop_assert_eq!(fwd.data(), t.data());
        prop_assert_eq!(bwd.data(), t.data());
    }

    #[test]
    fn rotations_compose_additively(c in 1usize..20, a in 0usize..40, b in 0usize..40) {
        let store = ParamStore::<f64>::new();
        let g = Graph::new(&store, Mode::Eval);
        let x = g.constant(ramp(1, 2, c));
        let two = rotate_channels(&g, rotate_channels(&g, x, a).unwrap(), b).unwrap();
        let one = rotate_channels(&g, x, a + b).unwrap();
        let (two, one) = (g.value(two), g.value(one));
        prop_assert_eq!(two.data(), one.data());
    }
}

fn identity_cfg(c: usize) -> BlockConfig {
    BlockConfig { core: CoreKind::Identity, theta_init: 0.0, ..BlockConfig::new(c) }
}

#[test]
fn shifted_layer_equals_plain_layer_with_identity_core() {
    for c in [8, 16, 32, 384] {
        let cfg = identity_cfg(c);
        let am = cfg.mamba_config();
        let build = |kind| {
            let mut store = ParamStore::<f64>::new();
            let pvm = Pvm::new(&mut store, &Scope::new("pvm"), kind, c, &am, 0.0, &mut Init::new(5)).unwrap();
            (store, pvm)
        };
        let (s_plain, plain) = build(PvmKind::Plain);
        let (s_shift, shifted) = build(PvmKind::ShiftRound);
        assert_eq!(s_plain.count(), s_shift.count());
        for (p, q) in s_plain.params().iter().zip(s_shift.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.data(), q.value.data());
        }
        let x = rand_tensor::<f64>(&mut rng(c as u64), &[2, 16, c], -2.0, 2.0);
        let run = |store: &ParamStore<f64>, pvm: &Pvm| {
            let g = Graph::new(store, Mode::Eval);
            let y = pvm.forward(&g, g.constant(x.clone()), 4, 4).unwrap();
            (*g.value(y)).clone()
        };
        assert_eq!(run(&s_plain, &plain).data(), run(&s_shift, &shifted).data(), "C={c}");
    }
}

#[test]
fn se_gate_lies_in_unit_interval_and_ignores_token_order() {
    let c = 16;
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, &Scope::new("se"), c, 4, &mut Init::new(1)).unwrap();
    let x = rand_tensor::<f64>(&mut rng(2), &[3, 10, c], -3.0, 3.0);
    let mut rev = x.clone();
    for b in 0..3 {
        for t in 0..10 {
            for ch in 0..c {
                let o = rev.offset(&[b, t, ch]);
                rev.data_mut()[o] = x.at(&[b, 9 - t, ch]);
            }
        }
    }
    let g = Graph::new(&store, Mode::Eval);
    let att = g.value(se.attention(&g, g.constant(x.clone())).unwrap());
    assert_eq!(att.shape(), &[3, 1, c]);
    assert!(att.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let att_rev = g.value(se.attention(&g, g.constant(rev)).unwrap());
    assert!(att.max_abs_diff(&att_rev) < 1e-12);
    let y = g.value(se.forward(&g, g.constant(x.clone())).unwrap());
    for b in 0..3 {
        for t in 0..10 {
            for ch in 0..c {
                let want = x.at(&[b, t, ch]) * att.at(&[b, 0, ch]);
                assert!((y.at(&[b, t, ch]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn se_with_zero_excite_weights_gates_by_sigmoid_of_bias() {
    let c = 8;
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, &Scope::new("se"), c, 4, &mut Init::new(1)).unwrap();
    let (w, b) = se.excite_ids();
    let shape = store.param(w).value.shape().to_vec();
    store.set_value(w, Tensor::zeros(&shape)).unwrap();
    let bias: Vec<f64> = (0..c).map(|i| i as f64 - 3.5).collect();
    store.set_value(b, Tensor::new(&[c], bias.clone()).unwrap()).unwrap();
    let g = Graph::new(&store, Mode::Eval);
    let x = rand_tensor::<f64>(&mut rng(3), &[2, 5, c], -1.0, 1.0);
    let att = g.value(se.attention(&g, g.constant(x)).unwrap());
    for bi in 0..2 {
        for (ch, &z) in bias.iter().enumerate() {
            assert!((att.at(&[bi, 0, ch]) - 1.0 / (1.0 + (-z).exp())).abs() < 1e-14);
        }
    }
}

#[test]
fn sk_weights_form_a_convex_combination() {
    let c = 16;
    let mut store = ParamStore::<f64>::new();
    let sk = SkBlock::new(&mut store, &Scope::new("sk"), c, 4, &mut Init::new(4)).unwrap();
    let mut r = rng(5);
    let a = rand_tensor::<f64>(&mut r, &[2, 9, c], -2.0, 2.0);
    let b = rand_tensor::<f64>(&mut r, &[2, 9, c], -2.0, 2.0);
    let g = Graph::new(&store, Mode::Eval);
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let (wg, wl) = sk.weights(&g, va, vb).unwrap();
    let (wg, wl) = (g.value(wg), g.value(wl));
    assert_eq!(wg.shape(), &[2, 1, c]);
    for (p, q) in wg.data().iter().zip(wl.data()) {
        assert!(*p > 0.0 && *q > 0.0);
        assert!((p + q - 1.0).abs() < 1e-14);
    }
    let y = g.value(sk.forward(&g, va, vb).unwrap());
    for bi in 0..2 {
        for t in 0..9 {
            for ch in 0..c {
                let lo = a.at(&[bi, t, ch]).min(b.at(&[bi, t, ch]));
                let hi = a.at(&[bi, t, ch]).max(b.at(&[bi, t, ch]));
                let v = y.at(&[bi, t, ch]);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
    // identical branches pass through unchanged
    let same = g.value(sk.forward(&g, va, va).unwrap());
    assert!(same.max_abs_diff(&a) < 1e-12);
    let bad = g.constant(Tensor::zeros(&[2, 8, c]));
    assert!(matches!(sk.forward(&g, va, bad), Err(Error::Dimension(_))));
}

#[test]
fn cnn_branch_has_a_three_pixel_receptive_field() {
    let c = 8;
    let mut store = ParamStore::<f64>::new();
    let cnn = CnnBranch::new(&mut store, &Scope::new("cnn"), c, &mut Init::new(6)).unwrap();
    assert_eq!(store.count(), CnnBranch::param_count(c));
    // a single impulse spreads at most one pixel in each direction
    let mut x = Tensor::<f64>::zeros(&[1, c, 7, 7]);
    let o = x.offset(&[0, 2, 3, 3]);
    x.data_mut()[o] = 1.0;
    let g = Graph::new(&store, Mode::Eval);
    let y0 = g.value(cnn.forward(&g, g.constant(Tensor::zeros(&[1, c, 7, 7]))).unwrap());
    let y1 = g.value(cnn.forward(&g, g.constant(x)).unwrap());
    for ch in 0..c {
        for i in 0..7 {
            for j in 0..7 {
                let d = (y1.at(&[0, ch, i, j]) - y0.at(&[0, ch, i, j])).abs();
                if i.abs_diff(3) > 1 || j.abs_diff(3) > 1 {
                    assert!(d < 1e-12, "({ch},{i},{j}) changed by {d}");
                }
            }
        }
    }
}

/// Gradient check over all parameters plus the inputs, registered as
/// parameters named `input{k}`.
fn gradcheck<F>(store: &mut ParamStore<f64>, inputs: Vec<Tensor<f64>>, max_per_param: usize, f: F) -> f64
where
    F: for<'g> Fn(&Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let ids: Vec<_> =
        inputs.into_iter().enumerate().map(|(k, t)| store.register(format!("input{k}"), t).unwrap()).collect();
    let check = GradCheck { max_per_param, ..GradCheck::default() };
    let report = check
        .run(store, |g| {
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let y = f(g, &xs)?;
            probe_loss(g, y, 99)
        })
        .unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_err < 1e-4, "max relative error {:.3e} at {}", report.max_rel_err, report.worst);
    report.max_rel_err
}

#[test]
fn gradcheck_cnn_branch() {
    let mut store = ParamStore::new();
    let cnn = CnnBranch::new(&mut store, &Scope::new("cnn"), 8, &mut Init::new(10)).unwrap();
    let x = rand_tensor(&mut rng(11), &[2, 8, 5, 5], -1.0, 1.0);
    gradcheck(&mut store, vec![x], usize::MAX, |g, xs| cnn.forward(g, xs[0]));
}

#[test]
fn gradcheck_se_block() {
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, &Scope::new("se"), 16, 4, &mut Init::new(12)).unwrap();
    let x = rand_tensor(&mut rng(13), &[2, 6, 16], -1.0, 1.0);
    gradcheck(&mut store, vec![x], usize::MAX, |g, xs| se.forward(g, xs[0]));
}

#[test]
fn gradcheck_sk_block() {
    let mut store = ParamStore::new();
    let sk = SkBlock::new(&mut store, &Scope::new("sk"), 16, 4, &mut Init::new(14)).unwrap();
    let mut r = rng(15);
    let a = rand_tensor(&mut r, &[2, 6, 16], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 6, 16], -1.0, 1.0);
    gradcheck(&mut store, vec![a, b], usize::MAX, |g, xs| sk.forward(g, xs[0], xs[1]));
}

fn pvm_gradcheck(kind: PvmKind, seed: u64) {
    let c = 16;
    let cfg = BlockConfig { theta_init: 0.7, ..BlockConfig::new(c) };
    let mut store = ParamStore::new();
    let pvm = Pvm::new(&mut store, &Scope::new("pvm"), kind, c, &cfg.mamba_config(), 0.7, &mut Init::new(seed)).unwrap();
    assert_eq!(store.count(), Pvm::param_count(kind, c, &cfg.mamba_config()));
    let x = rand_tensor(&mut rng(seed + 1), &[2, 16, c], -1.0, 1.0);
    gradcheck(&mut store, vec![x], 24, |g, xs| pvm.forward(g, xs[0], 4, 4));
}

#[test]
fn gradcheck_plain_pvm() {
    pvm_gradcheck(PvmKind::Plain, 20);
}

#[test]
fn gradcheck_shift_round_pvm() {
    pvm_gradcheck(PvmKind::ShiftRound, 22);
}

#[test]
fn gradcheck_noncircular_shift_pvm() {
    pvm_gradcheck(PvmKind::ShiftNoncircular, 24);
}

#[test]
fn gradcheck_asp_block() {
    let cfg = BlockConfig::new(16);
    let mut store = ParamStore::new();
    let block = AspBlock::new(&mut store, &Scope::new("blk"), cfg.clone(), &mut Init::new(30)).unwrap();
    assert_eq!(store.count(), cfg.param_count());
    let x = rand_tensor(&mut rng(31), &[2, 16, 4, 4], -1.0, 1.0);
    gradcheck(&mut store, vec![x], 12, |g, xs| block.forward(g, xs[0]));
}

fn all_flags() -> impl Iterator<Item = BlockFlags> {
    (0..64u32).map(|m| BlockFlags {
        shift: m & 1 != 0,
        shift_round: m & 2 != 0,
        atrous: m & 4 != 0,
        cnn: m & 8 != 0,
        se: m & 16 != 0,
        sk: m & 32 != 0,
    })
}

#[test]
fn every_valid_flag_combination_builds_and_backpropagates() {
    let mut valid = 0;
    for flags in all_flags() {
        let cfg = BlockConfig { flags, ..BlockConfig::new(16) };
        let mut store = ParamStore::<f32>::new();
        let built = AspBlock::new(&mut store, &Scope::new("blk"), cfg.clone(), &mut Init::new(40));
        let expect_ok = !(flags.shift && flags.shift_round) && !(flags.sk && !flags.cnn);
        assert_eq!(built.is_ok(), expect_ok, "{:?}", flags);
        let Ok(block) = built else {
            assert!(matches!(built, Err(Error::Config(_))));
            continue;
        };
        valid += 1;
        assert_eq!(store.count(), cfg.param_count(), "{}", flags.label());
        let g = Graph::new(&store, Mode::Train);
        let x = g.input(rand_tensor(&mut rng(41), &[2, 16, 8, 8], -1.0, 1.0));
        let y = block.forward(&g, x).unwrap();
        assert_eq!(g.shape(y), vec![2, 16, 8, 8]);
        let grads = g.backward(probe_loss(&g, y, 1).unwrap()).unwrap();
        assert!(grads.wrt(x).is_some());
        let reached = store.ids().filter(|&id| grads.param(id).is_some()).count();
        assert_eq!(reached, store.params().len(), "{}", flags.label());
    }
    assert_eq!(valid, 36);
}

#[test]
fn flag_labels() {
    assert_eq!(BlockFlags::default().label(), "SR+AS+CNN+SE+SK");
    assert_eq!(BlockFlags::none().label(), "none");
    assert!(BlockFlags::default().validate().is_ok());
}

#[test]
fn block_config_rejects_bad_channel_counts() {
    for c in [0, 4, 12, 20] {
        assert!(matches!(BlockConfig::new(c).validate(), Err(Error::Config(_))));
    }
    let mut store = ParamStore::<f64>::new();
    let block = AspBlock::new(&mut store, &Scope::new("b"), BlockConfig::new(8), &mut Init::new(0)).unwrap();
    let g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 16, 4, 4]));
    assert!(matches!(block.forward(&g, x), Err(Error::Dimension(_))));
}

#[test]
fn theta_scales_the_residual() {
    let c = 8;
    let cfg = identity_cfg(c);
    let mut store = ParamStore::<f64>::new();
    let pvm = Pvm::new(&mut store, &Scope::new("p"), PvmKind::Plain, c, &cfg.mamba_config(), 0.0, &mut Init::new(3))
        .unwrap();
    let x = rand_tensor::<f64>(&mut rng(8), &[1, 4, c], -1.0, 1.0);
    let out = |store: &ParamStore<f64>| {
        let g = Graph::new(store, Mode::Eval);
        (*g.value(pvm.forward(&g, g.constant(x.clone()), 2, 2).unwrap())).clone()
    };
    let zero = out(&store);
    store.set_value(pvm.theta(), Tensor::scalar(0.5)).unwrap();
    let half = out(&store);
    assert!(zero.max_abs_diff(&half) > 1e-6);
}
