use crate::error::{dim_err, Result};
use crate::numerics::ops::NORM_EPS;
use crate::numerics::{Float, Graph, Init, ParamId, ParamStore, Scope, Tensor, Var};

pub(crate) fn hidden_width(c: usize, reduction: usize) -> usize {
    (c / reduction.max(1)).max(4)
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub(crate) fn new<T: Float>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        din: usize,
        dout: usize,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.register(scope.name("weight"), init.fan_in(&[dout, din], din))?,
            b: store.register(scope.name("bias"), init.fan_in(&[dout], din))?,
        })
    }

    pub(crate) fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.linear(x, g.param(self.w), Some(g.param(self.b)))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, c: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.register(scope.name("weight"), Tensor::ones(&[c]))?,
            beta: store.register(scope.name("bias"), Tensor::zeros(&[c]))?,
        })
    }

    pub(crate) fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta), T::c(NORM_EPS))
    }
}

/// Squeeze-and-excitation on tokens `[B, L, C]`: layer norm, mean over
/// tokens, `C -> C/r -> C` bottleneck with GELU, sigmoid gate that scales
/// the input channels.
#[derive(Clone, Debug)]
pub struct SeBlock {
    norm: LayerNorm,
    squeeze: Linear,
    excite: Linear,
}

impl SeBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        c: usize,
        reduction: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let h = hidden_width(c, reduction);
        Ok(SeBlock {
            norm: LayerNorm::new(store, &scope.child("norm"), c)?,
            squeeze: Linear::new(store, &scope.child("squeeze"), c, h, init)?,
            excite: Linear::new(store, &scope.child("excite"), h, c, init)?,
        })
    }

    /// Channel gate `[B, 1, C]` with values in (0, 1).
    pub fn attention<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let y = self.norm.forward(g, x)?;
        let y = g.mean_axis(y, 1)?;
        let y = g.gelu(self.squeeze.forward(g, y)?)?;
        let y = g.sigmoid(self.excite.forward(g, y)?)?;
        g.reshape(y, &[s[0], 1, s[2]])
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let att = self.attention(g, x)?;
        g.mul_bcast(x, att)
    }

    pub fn excite_ids(&self) -> (ParamId, ParamId) {
        (self.excite.w, self.excite.b)
    }

    pub fn param_count(c: usize, reduction: usize) -> usize {
        let h = hidden_width(c, reduction);
        2 * c + c * h + h + h * c + c
    }
}

/// Selective-kernel fusion of a global and a local branch on `[B, L, C]`:
/// per-channel softmax weights over the two branches from the pooled sum.
#[derive(Clone, Debug)]
pub struct SkBlock {
    reduce: Linear,
    head_g: Linear,
    head_l: Linear,
}

impl SkBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        c: usize,
        reduction: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let h = hidden_width(c, reduction);
        Ok(SkBlock {
            reduce: Linear::new(store, &scope.child("reduce"), c, h, init)?,
            head_g: Linear::new(store, &scope.child("head_global"), h, c, init)?,
            head_l: Linear::new(store, &scope.child("head_local"), h, c, init)?,
        })
    }

    /// Branch weights `(w_g, w_l)`, each `[B, 1, C]`, summing to one.
    pub fn weights<T: Float>(&self, g: &Graph<'_, T>, gl: Var, lo: Var) -> Result<(Var, Var)> {
        let (sg, sl) = (g.shape(gl), g.shape(lo));
        if sg != sl || sg.len() != 3 {
            return Err(dim_err!("sk block: branch shapes {:?} and {:?}", sg, sl));
        }
        let (b, c) = (sg[0], sg[2]);
        let s = g.mean_axis(g.add(gl, lo)?, 1)?;
        let z = g.gelu(self.reduce.forward(g, s)?)?;
        let ag = g.reshape(self.head_g.forward(g, z)?, &[b, 1, c])?;
        let al = g.reshape(self.head_l.forward(g, z)?, &[b, 1, c])?;
        let w = g.softmax(g.concat(&[ag, al], 1)?, 1)?;
        Ok((g.narrow(w, 1, 0, 1)?, g.narrow(w, 1, 1, 1)?))
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, gl: Var, lo: Var) -> Result<Var> {
        let (wg, wl) = self.weights(g, gl, lo)?;
        g.add(g.mul_bcast(gl, wg)?, g.mul_bcast(lo, wl)?)
    }

    pub fn head_ids(&self) -> [ParamId; 4] {
        [self.head_g.w, self.head_g.b, self.head_l.w, self.head_l.b]
    }

    pub fn param_count(c: usize, reduction: usize) -> usize {
        let h = hidden_width(c, reduction);
        c * h + h + 2 * (h * c + c)
    }
}
