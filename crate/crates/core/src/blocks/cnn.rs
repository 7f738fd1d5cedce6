use crate::error::Result;
use crate::numerics::ops::NORM_EPS;
use crate::numerics::{BufferId, Conv2dOpts, Float, Graph, Init, ParamId, ParamStore, Scope, Tensor, Var};

/// Depthwise 3x3 conv, batch norm, GELU, 1x1 conv on `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct CnnBranch {
    channels: usize,
    dw_w: ParamId,
    dw_b: ParamId,
    bn: BatchNorm,
    pw_w: ParamId,
    pw_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

impl BatchNorm {
    pub(crate) fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.register(scope.name("weight"), Tensor::ones(&[c]))?,
            beta: store.register(scope.name("bias"), Tensor::zeros(&[c]))?,
            mean: store.register_buffer(scope.name("running_mean"), Tensor::zeros(&[c]))?,
            var: store.register_buffer(scope.name("running_var"), Tensor::ones(&[c]))?,
        })
    }

    pub(crate) fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.batch_norm2d(x, g.param(self.gamma), g.param(self.beta), self.mean, self.var, T::c(NORM_EPS))
    }
}

impl CnnBranch {
    pub fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, c: usize, init: &mut Init) -> Result<Self> {
        Ok(CnnBranch {
            channels: c,
            dw_w: store.register(scope.name("dwconv.weight"), init.fan_in(&[c, 1, 3, 3], 9))?,
            dw_b: store.register(scope.name("dwconv.bias"), init.fan_in(&[c], 9))?,
            bn: BatchNorm::new(store, &scope.child("bn"), c)?,
            pw_w: store.register(scope.name("pwconv.weight"), init.fan_in(&[c, c, 1, 1], c))?,
            pw_b: store.register(scope.name("pwconv.bias"), init.fan_in(&[c], c))?,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let dw = Conv2dOpts { groups: self.channels, ..Conv2dOpts::same(3) };
        let y = g.conv2d(x, g.param(self.dw_w), Some(g.param(self.dw_b)), dw)?;
        let y = self.bn.forward(g, y)?;
        let y = g.gelu(y)?;
        g.conv2d(y, g.param(self.pw_w), Some(g.param(self.pw_b)), Conv2dOpts::default())
    }

    pub fn param_count(c: usize) -> usize {
        9 * c + c + 2 * c + c * c + c
    }
}
