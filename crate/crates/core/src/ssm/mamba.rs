use std::rc::Rc;

use rand::Rng;

use super::selective::selective_scan;
use crate::error::{config_err, dim_err, Result};
use crate::numerics::{Float, Graph, Init, ParamId, ParamStore, Scope, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    /// `None` means `ceil(d_model / 16)`.
    pub dt_rank: Option<usize>,
    /// Number of selective-parameter bundles (`x_proj`, `dt_proj`, `A_log`,
    /// `D`); sequence `n` uses bundle `groups[n]`.
    pub groups: usize,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        MambaConfig { d_model, d_state: 16, expand: 2, d_conv: 4, dt_rank: None, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.d_model.div_ceil(16))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.expand == 0 || self.d_conv == 0 || self.groups == 0 {
            return Err(config_err!("mamba dimensions must be positive: {:?}", self));
        }
        Ok(())
    }

    /// Scalar parameter count of [`Mamba`] with this configuration.
    pub fn param_count(&self) -> usize {
        let (d, di, n, r, k) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank(), self.groups);
        let shared = d * 2 * di + di * self.d_conv + di + di * d;
        let per_group = (r + 2 * n) * di + di * r + di + di * n + di;
        shared + k * per_group
    }

    /// Multiply-accumulates per token (one bundle is used per token).
    pub fn macs_per_token(&self) -> usize {
        let (d, di, n, r) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank());
        d * 2 * di + di * self.d_conv + di * (r + 2 * n) + r * di + 3 * di * n + di + di * d
    }
}

/// One Mamba block: `in_proj -> (stream, gate)`, `stream -> causal conv ->
/// SiLU -> selective scan`, `out_proj(scan * SiLU(gate))`.
#[derive(Clone, Debug)]
pub struct Mamba {
    pub cfg: MambaConfig,
    in_proj: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    x_proj: ParamId,
    dt_w: ParamId,
    dt_b: ParamId,
    a_log: ParamId,
    d: ParamId,
    out_proj: ParamId,
}

impl Mamba {
    pub fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, cfg: MambaConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let (d, di, n, r, k) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank(), cfg.groups);
        let in_proj = store.register(scope.name("in_proj.weight"), init.fan_in(&[2 * di, d], d))?;
        let conv_w = store.register(scope.name("conv1d.weight"), init.fan_in(&[di, cfg.d_conv], cfg.d_conv))?;
        let conv_b = store.register(scope.name("conv1d.bias"), init.fan_in(&[di], cfg.d_conv))?;
        let x_proj = store.register(scope.name("x_proj.weight"), init.fan_in(&[k, r + 2 * n, di], di))?;
        let dt_w = store.register(scope.name("dt_proj.weight"), init.uniform(&[k, di, r], (r as f64).powf(-0.5)))?;
        // softplus(bias) log-uniform in [1e-3, 0.1]
        let dt_bias = Tensor::from_fn(&[k, di], |_| {
            let u: f64 = init.rng().gen();
            let dt = (u * (0.1f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln()).exp();
            T::c(dt + (-(-dt).exp_m1()).ln())
        });
        let dt_b = store.register(scope.name("dt_proj.bias"), dt_bias)?;
        let a_log = store.register(
            scope.name("A_log"),
            Tensor::from_fn(&[k, di, n], |i| T::c(((i % n) + 1) as f64).ln()),
        )?;
        let dskip = store.register(scope.name("D"), Tensor::ones(&[k, di]))?;
        let out_proj = store.register(scope.name("out_proj.weight"), init.fan_in(&[d, di], di))?;
        Ok(Mamba { cfg, in_proj, conv_w, conv_b, x_proj, dt_w, dt_b, a_log, d: dskip, out_proj })
    }

    pub fn out_proj(&self) -> ParamId {
        self.out_proj
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.in_proj,
            self.conv_w,
            self.conv_b,
            self.x_proj,
            self.dt_w,
            self.dt_b,
            self.a_log,
            self.d,
            self.out_proj,
        ]
    }

    /// `x [N, L, d_model] -> [N, L, d_model]`, all sequences on bundle 0.
    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.shape(x).first().copied().unwrap_or(0);
        self.forward_grouped(g, x, Rc::new(vec![0; n]))
    }

    /// As [`forward`](Self::forward) with an explicit bundle per sequence.
    pub fn forward_grouped<T: Float>(&self, g: &Graph<'_, T>, x: Var, groups: Rc<Vec<usize>>) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 3 || xs[2] != self.cfg.d_model {
            return Err(dim_err!("mamba: input {:?} for d_model {}", xs, self.cfg.d_model));
        }
        let (di, n, r) = (self.cfg.d_inner(), self.cfg.d_state, self.cfg.dt_rank());
        let p = |id| g.param(id);
        let xz = g.linear(x, p(self.in_proj), None)?;
        let stream = g.narrow(xz, 2, 0, di)?;
        let gate = g.narrow(xz, 2, di, di)?;
        let stream = g.conv1d_causal(stream, p(self.conv_w), p(self.conv_b))?;
        let stream = g.silu(stream)?;
        let proj = g.grouped_linear(stream, p(self.x_proj), None, Rc::clone(&groups))?;
        let dt_in = g.narrow(proj, 2, 0, r)?;
        let bm = g.narrow(proj, 2, r, n)?;
        let cm = g.narrow(proj, 2, r + n, n)?;
        let dt = g.grouped_linear(dt_in, p(self.dt_w), Some(p(self.dt_b)), Rc::clone(&groups))?;
        let dt = g.softplus(dt)?;
        let a = g.exp(p(self.a_log))?;
        let a = g.neg(a)?;
        let y = selective_scan(g, stream, dt, a, bm, cm, p(self.d), groups)?;
        let y = g.mul(y, g.silu(gate)?)?;
        g.linear(y, p(self.out_proj), None)
    }
}
