//! Self-checks behind the `verify` command: scan plan sweep, parameter
//! claims, finite-difference gradients, metric counting and the selective
//! scan against a per-timestep loop.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Cab, Sab};
use crate::blocks::{AspBlock, BlockConfig, CnnBranch, Pvm, PvmKind, SeBlock, SkBlock};
use crate::error::{config_err, Result};
use crate::network::{count_flops, Network, NetworkConfig};
use crate::numerics::{Float, GradCheck, Graph, Init, Mode, ParamStore, Scope, Tensor, Var};
use crate::pipeline::compute_metrics;
use crate::scan::{compute_padding, ScanPlan};
use crate::ssm::{selective_scan, MambaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Scan,
    Gradcheck,
    Params,
    Metrics,
    SsmOracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Scan, Suite::Params, Suite::Metrics, Suite::SsmOracle, Suite::Gradcheck];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Scan => "scan",
            Suite::Gradcheck => "gradcheck",
            Suite::Params => "params",
            Suite::Metrics => "metrics",
            Suite::SsmOracle => "ssm-oracle",
        }
    }

    pub fn run(self) -> Result<Vec<Check>> {
        match self {
            Suite::Scan => scan_suite(),
            Suite::Gradcheck => gradcheck_suite(),
            Suite::Params => params_suite(),
            Suite::Metrics => metrics_suite(),
            Suite::SsmOracle => ssm_suite(),
        }
    }
}

impl FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err!("unknown suite `{}` (expected scan, gradcheck, params, metrics or ssm-oracle)", s))
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { suite: suite.name(), name: name.into(), passed, detail: detail.into(), seconds: 0.0 }
    }
}

/// Fixed-width table, one row per check, with a pass count footer.
pub struct Summary<'a>(pub &'a [Check]);

impl fmt::Display for Summary<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self.0.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
        writeln!(f, "{:<10} {:<name_w$} {:<6} {:>8}  detail", "suite", "check", "status", "time")?;
        for c in self.0 {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{:<10} {:<name_w$} {:<6} {:>7.2}s  {}", c.suite, c.name, status, c.seconds, c.detail)?;
        }
        let passed = self.0.iter().filter(|c| c.passed).count();
        write!(f, "{}/{} checks passed", passed, self.0.len())
    }
}

fn timed(f: impl FnOnce() -> Result<Check>) -> Result<Check> {
    let t = Instant::now();
    let mut c = f()?;
    c.seconds = t.elapsed().as_secs_f64();
    Ok(c)
}

fn rand_tensor<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.gen_range(lo..hi)))
}

fn scan_suite() -> Result<Vec<Check>> {
    let s = Suite::Scan;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();
    let start = Instant::now();
    let (mut partition, mut length, mut trip, mut global) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut grids = 0;
    for h in 1..=17 {
        for w in 1..=17 {
            for step in 1..=8 {
                grids += 1;
                let tag = format!("{}x{} S={}", h, w, step);
                let plan = ScanPlan::atrous(h, w, step)?;
                let (ph, pw) = compute_padding(h, w, step);
                let want_len = (h + ph) * (w + pw) / (step * step);
                if plan.seq_len() != want_len || plan.forward.iter().any(|q| q.len() != want_len) {
                    length.push(tag.clone());
                }
                let mut seen = vec![0u32; (h + ph) * (w + pw)];
                plan.forward.iter().flatten().for_each(|&i| seen[i] += 1);
                if plan.forward.len() != step * step || seen.iter().any(|&c| c != 1) {
                    partition.push(tag.clone());
                }
                let x = rand_tensor::<f64>(&mut rng, &[1, 2, h, w], -1.0, 1.0);
                if plan.invert(&plan.apply(&x)?)? != x {
                    trip.push(tag.clone());
                }
                if step == 1 {
                    let raster: Vec<usize> = (0..h * w).collect();
                    if plan.forward != vec![raster] {
                        global.push(tag);
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let verdict = |name: &str, bad: Vec<String>, n: usize| {
        let detail = match bad.first() {
            None => format!("{} grids", n),
            Some(first) => format!("{} of {} grids fail, first {}", bad.len(), n, first),
        };
        Check { seconds: elapsed / 4.0, ..Check::new(s, name, bad.is_empty(), detail) }
    };
    out.push(verdict("atrous partition", partition, grids));
    out.push(verdict("sequence length (H+Ph)(W+Pw)/S^2", length, grids));
    out.push(verdict("bit-exact round trip", trip, grids));
    out.push(verdict("S=1 equals raster scan", global, 17 * 17));

    out.push(timed(|| {
        let mut bad = 0;
        for h in 1..=17 {
            for w in 1..=17 {
                let e = ScanPlan::efficient(h, w)?;
                let a = ScanPlan::atrous(h, w, 2)?;
                for k in 0..4 {
                    let (mut x, mut y) = (e.forward[k].clone(), a.forward[k].clone());
                    let reordered = x != y;
                    x.sort_unstable();
                    y.sort_unstable();
                    let horizontal_kept = k < 2;
                    let vertical_differs = reordered || e.pad_h + h <= 2 || e.pad_w + w <= 2;
                    if x != y || (horizontal_kept && reordered) || (!horizontal_kept && !vertical_differs) {
                        bad += 1;
                    }
                }
            }
        }
        Ok(Check::new(s, "efficient scan vs atrous", bad == 0, format!("{} sub-image mismatches", bad)))
    })?);
    Ok(out)
}

fn params_suite() -> Result<Vec<Check>> {
    let s = Suite::Params;
    let mut out = Vec::new();
    out.push(timed(|| {
        let full = MambaConfig::new(384).param_count();
        let cfg = BlockConfig::new(384);
        let pvm = Pvm::param_count(PvmKind::Plain, 384, &cfg.mamba_config());
        let red = 1.0 - pvm as f64 / full as f64;
        Ok(Check::new(
            s,
            "PVM reduction at C=384",
            (red - 0.748).abs() <= 0.03,
            format!("{:.1}% ({} vs {}), target 74.8 +- 3", 100.0 * red, pvm, full),
        ))
    })?);
    let steps = [1, 2, 3, 4, 8];
    let t = Instant::now();
    let mut counts = Vec::new();
    for &st in &steps {
        counts.push(Network::<f32>::build(&NetworkConfig::base().with_step(st))?.count_parameters());
    }
    let listing = steps.iter().zip(&counts).map(|(s, c)| format!("S={}:{}", s, c)).collect::<Vec<_>>().join(" ");
    let built = t.elapsed().as_secs_f64();
    let increasing = counts.windows(2).all(|w| w[0] < w[1]);
    out.push(Check { seconds: built, ..Check::new(s, "count increases with S", increasing, listing) });
    let ratio = counts[4] as f64 / counts[0] as f64;
    out.push(Check::new(s, "count(S=8)/count(S=1)", (2.2..=3.1).contains(&ratio), format!("{:.3}, target [2.2, 3.1]", ratio)));
    let flops: Vec<u64> = steps.iter().map(|&st| count_flops(&NetworkConfig::base().with_step(st)).total()).collect();
    let (lo, hi) = (*flops.iter().min().unwrap() as f64, *flops.iter().max().unwrap() as f64);
    out.push(Check::new(
        s,
        "MACs constant across S",
        hi / lo - 1.0 <= 0.01,
        format!("{:.4} G, spread {:.3}%", lo / 1e9, 100.0 * (hi / lo - 1.0)),
    ));
    let base = counts[1] as f64;
    out.push(Check::new(s, "base size", (base / 4.69e6 - 1.0).abs() <= 0.25, format!("{:.3}M vs 4.69M +- 25%", base / 1e6)));
    out.push(timed(|| {
        let tiny = Network::<f32>::build(&NetworkConfig::tiny())?.count_parameters() as f64;
        Ok(Check::new(s, "tiny size", (tiny / 0.29e6 - 1.0).abs() <= 0.5, format!("{:.3}M vs 0.29M +- 50%", tiny / 1e6)))
    })?);
    Ok(out)
}

fn metrics_suite() -> Result<Vec<Check>> {
    let s = Suite::Metrics;
    timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut mismatches, mut identity) = (0, 0.0f64);
        for _ in 0..100 {
            let n = rng.gen_range(1..500);
            let density = rng.gen_range(0.0..1.0);
            let pred: Tensor<f64> = rand_tensor(&mut rng, &[n], 0.0, 1.0);
            let target = Tensor::from_fn(&[n], |_| if rng.gen_bool(density) { 1.0 } else { 0.0 });
            let m = compute_metrics(&pred, &target)?;
            let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
            for (&p, &t) in pred.data().iter().zip(target.data()) {
                match (p >= 0.5, t == 1.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
            let r = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
            let want = [r(tp, tp + fp + fn_), r(2 * tp, 2 * tp + fp + fn_), r(tp + tn, n as u64), r(tn, tn + fp), r(tp, tp + fn_)];
            if [m.miou(), m.dsc(), m.acc(), m.spe(), m.sen()] != want {
                mismatches += 1;
            }
            identity = identity.max((m.dsc() - 2.0 * m.miou() / (1.0 + m.miou())).abs());
        }
        Ok(Check::new(
            s,
            "counting oracle, 100 pairs",
            mismatches == 0 && identity < 1e-12,
            format!("{} mismatches, dsc identity error {:.1e}", mismatches, identity),
        ))
    })
    .map(|c| vec![c])
}

fn ssm_suite() -> Result<Vec<Check>> {
    let s = Suite::SsmOracle;
    timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (n, l, di, ns, k) =
                (rng.gen_range(1..4), rng.gen_range(1..12), rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..3));
            let u: Tensor<f64> = rand_tensor(&mut rng, &[n, l, di], -1.0, 1.0);
            let dt: Tensor<f64> = rand_tensor(&mut rng, &[n, l, di], 0.05, 1.0);
            let a: Tensor<f64> = rand_tensor(&mut rng, &[k, di, ns], -2.0, -0.1);
            let b: Tensor<f64> = rand_tensor(&mut rng, &[n, l, ns], -1.0, 1.0);
            let c: Tensor<f64> = rand_tensor(&mut rng, &[n, l, ns], -1.0, 1.0);
            let d: Tensor<f64> = rand_tensor(&mut rng, &[k, di], -1.0, 1.0);
            let groups: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let store = ParamStore::new();
            let g = Graph::new(&store, Mode::Eval);
            let [uv, dv, av, bv, cv, ddv] = [&u, &dt, &a, &b, &c, &d].map(|t| g.constant(t.clone()));
            let y = g.value(selective_scan(&g, uv, dv, av, bv, cv, ddv, Rc::new(groups.clone()))?);
            for sq in 0..n {
                let gk = groups[sq];
                for ch in 0..di {
                    let mut h = vec![0.0; ns];
                    for t in 0..l {
                        let (step, x) = (dt.at(&[sq, t, ch]), u.at(&[sq, t, ch]));
                        let mut acc = d.at(&[gk, ch]) * x;
                        for j in 0..ns {
                            h[j] = (step * a.at(&[gk, ch, j])).exp() * h[j] + step * b.at(&[sq, t, j]) * x;
                            acc += c.at(&[sq, t, j]) * h[j];
                        }
                        worst = worst.max((y.at(&[sq, t, ch]) - acc).abs());
                    }
                }
            }
        }
        Ok(Check::new(s, "selective scan vs loop, 100 instances", worst <= 1e-6, format!("max abs diff {:.2e}", worst)))
    })
    .map(|c| vec![c])
}

/// `sum(y * r)` with a fixed random `r`.
fn probe<'g>(g: &Graph<'g, f64>, y: Var, seed: u64) -> Result<Var> {
    let r = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &g.shape(y), -1.0, 1.0);
    let p = g.mul(y, g.constant(r))?;
    g.sum_all(p)
}

fn grad_check<F>(name: &str, store: &mut ParamStore<f64>, inputs: Vec<Tensor<f64>>, check: GradCheck, f: F) -> Result<Check>
where
    F: for<'g> Fn(&Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    timed(|| {
        let ids = inputs
            .into_iter()
            .enumerate()
            .map(|(k, t)| store.register(format!("input{}", k), t))
            .collect::<Result<Vec<_>>>()?;
        let report = check.run(store, |g| {
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            probe(g, f(g, &xs)?, 99)
        })?;
        Ok(Check::new(
            Suite::Gradcheck,
            name,
            report.checked > 0 && report.max_rel_err < 1e-4,
            format!("max rel err {:.2e} over {} elements, worst {}", report.max_rel_err, report.checked, report.worst),
        ))
    })
}

fn gradcheck_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let full = GradCheck::default();
    let sampled = |n| GradCheck { max_per_param: n, ..GradCheck::default() };
    let mut out = Vec::new();

    let mut st = ParamStore::new();
    let cnn = CnnBranch::new(&mut st, &Scope::new("cnn"), 8, &mut Init::new(10))?;
    let x = rand_tensor(&mut rng, &[2, 8, 5, 5], -1.0, 1.0);
    out.push(grad_check("CNN branch", &mut st, vec![x], full.clone(), |g, x| cnn.forward(g, x[0]))?);

    let mut st = ParamStore::new();
    let se = SeBlock::new(&mut st, &Scope::new("se"), 16, 4, &mut Init::new(12))?;
    let x = rand_tensor(&mut rng, &[2, 6, 16], -1.0, 1.0);
    out.push(grad_check("SE block", &mut st, vec![x], full.clone(), |g, x| se.forward(g, x[0]))?);

    let mut st = ParamStore::new();
    let sk = SkBlock::new(&mut st, &Scope::new("sk"), 16, 4, &mut Init::new(14))?;
    let xs = vec![rand_tensor(&mut rng, &[2, 6, 16], -1.0, 1.0), rand_tensor(&mut rng, &[2, 6, 16], -1.0, 1.0)];
    out.push(grad_check("SK block", &mut st, xs, full.clone(), |g, x| sk.forward(g, x[0], x[1]))?);

    let mut st = ParamStore::new();
    let sab = Sab::new(&mut st, &Scope::new("sab"), &mut Init::new(5))?;
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    out.push(grad_check("SAB", &mut st, vec![x], full.clone(), |g, x| sab.forward(g, x[0]))?);

    let mut st = ParamStore::new();
    let chans = [4, 8, 8, 8, 8];
    let cab = Cab::new(&mut st, &Scope::new("cab"), &chans, &mut Init::new(8))?;
    let sizes = [8, 4, 2, 2, 1];
    let xs: Vec<Tensor<f64>> = chans.iter().zip(sizes).map(|(&c, s)| rand_tensor(&mut rng, &[2, c, s, s], -1.0, 1.0)).collect();
    out.push(grad_check("CAB", &mut st, xs, full.clone(), |g, x| {
        let ys = cab.forward(g, x)?;
        let flat = ys.iter().map(|&y| g.reshape(y, &[g.shape(y).iter().product()])).collect::<Result<Vec<_>>>()?;
        g.concat(&flat, 0)
    })?);

    for (name, kind) in [("APVM", PvmKind::Plain), ("ASPVM", PvmKind::ShiftRound)] {
        let cfg = BlockConfig { theta_init: 0.7, ..BlockConfig::new(16) };
        let mut st = ParamStore::new();
        let pvm = Pvm::new(&mut st, &Scope::new("pvm"), kind, 16, &cfg.mamba_config(), 0.7, &mut Init::new(20))?;
        let x = rand_tensor(&mut rng, &[2, 16, 16], -1.0, 1.0);
        out.push(grad_check(name, &mut st, vec![x], sampled(24), |g, x| pvm.forward(g, x[0], 4, 4))?);
    }

    let mut st = ParamStore::new();
    let block = AspBlock::new(&mut st, &Scope::new("blk"), BlockConfig::new(16), &mut Init::new(30))?;
    let x = rand_tensor(&mut rng, &[2, 16, 4, 4], -1.0, 1.0);
    out.push(grad_check("ASP block", &mut st, vec![x], sampled(12), |g, x| block.forward(g, x[0]))?);

    let mut net = Network::<f64>::build(&NetworkConfig::micro())?;
    let arch = net.clone();
    let x = rand_tensor(&mut rng, &[2, 3, 32, 32], -1.0, 1.0);
    let check = GradCheck { max_per_param: 2, step: 1e-5, ..GradCheck::default() };
    out.push(grad_check("micro network", &mut net.store, vec![x], check, |g, x| arch.forward(g, x[0]))?);
    Ok(out)
}
