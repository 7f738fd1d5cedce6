//! Skip-path attention shared across the first five encoder stages: a
//! spatial attention block (SAB) and a channel attention block (CAB).

use crate::blocks::Linear;
use crate::error::{config_err, dim_err, Result};
use crate::numerics::{Conv2dOpts, Float, Graph, Init, ParamId, ParamStore, Scope, Var};

/// Channel-wise max and mean -> dilated 7x7 conv -> sigmoid, applied as
/// `x * att + x`. One kernel serves every stage.
#[derive(Clone, Debug)]
pub struct Sab {
    w: ParamId,
    b: ParamId,
}

pub const SAB_KERNEL: usize = 7;
pub const SAB_DILATION: usize = 3;

impl Sab {
    pub fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, init: &mut Init) -> Result<Self> {
        let fan = 2 * SAB_KERNEL * SAB_KERNEL;
        Ok(Sab {
            w: store.register(scope.name("conv.weight"), init.fan_in(&[1, 2, SAB_KERNEL, SAB_KERNEL], fan))?,
            b: store.register(scope.name("conv.bias"), init.fan_in(&[1], fan))?,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    /// Spatial map `[B, 1, H, W]` in (0, 1).
    pub fn attention<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 {
            return Err(dim_err!("sab: expected [B, C, H, W], got {:?}", s));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let mx = g.reshape(g.max_axis(x, 1)?, &[b, 1, h, w])?;
        let mean = g.reshape(g.mean_axis(x, 1)?, &[b, 1, h, w])?;
        let pooled = g.concat(&[mx, mean], 1)?;
        let pad = SAB_DILATION * (SAB_KERNEL - 1) / 2;
        let opts = Conv2dOpts { padding: (pad, pad), dilation: SAB_DILATION, ..Conv2dOpts::default() };
        let a = g.conv2d(pooled, g.param(self.w), Some(g.param(self.b)), opts)?;
        g.sigmoid(a)
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let att = self.attention(g, x)?;
        g.add(g.mul_bcast(x, att)?, x)
    }
}

/// Pools every stage to a channel vector, runs one 1D conv (k=3) across the
/// concatenation of all stages, then a per-stage linear and sigmoid; each
/// stage becomes `x * att + x`.
#[derive(Clone, Debug)]
pub struct Cab {
    channels: Vec<usize>,
    conv_w: ParamId,
    conv_b: ParamId,
    linears: Vec<Linear>,
}

impl Cab {
    pub fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, channels: &[usize], init: &mut Init) -> Result<Self> {
        if channels.len() != 5 {
            return Err(config_err!("cab fuses exactly 5 stages, got {}", channels.len()));
        }
        let conv_w = store.register(scope.name("conv1d.weight"), init.fan_in(&[1, 1, 1, 3], 3))?;
        let conv_b = store.register(scope.name("conv1d.bias"), init.fan_in(&[1], 3))?;
        let linears = channels
            .iter()
            .enumerate()
            .map(|(k, &c)| Linear::new(store, &scope.child(format!("linear{}", k + 1)), c, c, init))
            .collect::<Result<_>>()?;
        Ok(Cab { channels: channels.to_vec(), conv_w, conv_b, linears })
    }

    pub fn linear_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.linears.iter().map(|l| (l.w, l.b)).collect()
    }

    pub fn conv_ids(&self) -> (ParamId, ParamId) {
        (self.conv_w, self.conv_b)
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, stages: &[Var]) -> Result<Vec<Var>> {
        if stages.len() != 5 {
            return Err(config_err!("cab fuses exactly 5 stages, got {}", stages.len()));
        }
        let mut pooled = Vec::with_capacity(5);
        for (k, (&x, &c)) in stages.iter().zip(&self.channels).enumerate() {
            let s = g.shape(x);
            if s.len() != 4 || s[1] != c {
                return Err(dim_err!("cab: stage {} has shape {:?}, expected {} channels", k + 1, s, c));
            }
            pooled.push(g.global_avg_pool(x)?);
        }
        let b = g.shape(stages[0])[0];
        let total: usize = self.channels.iter().sum();
        let v = g.concat(&pooled, 1)?;
        let v = g.reshape(v, &[b, 1, 1, total])?;
        let opts = Conv2dOpts { padding: (0, 1), ..Conv2dOpts::default() };
        let v = g.conv2d(v, g.param(self.conv_w), Some(g.param(self.conv_b)), opts)?;
        let v = g.reshape(v, &[b, total])?;
        let mut out = Vec::with_capacity(5);
        let mut off = 0;
        for ((&x, &c), lin) in stages.iter().zip(&self.channels).zip(&self.linears) {
            let part = g.narrow(v, 1, off, c)?;
            off += c;
            let att = g.sigmoid(lin.forward(g, part)?)?;
            let att = g.reshape(att, &[b, c, 1, 1])?;
            out.push(g.add(g.mul_bcast(x, att)?, x)?);
        }
        Ok(out)
    }
}
