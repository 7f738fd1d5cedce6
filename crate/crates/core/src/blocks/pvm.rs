use super::fusion::{LayerNorm, Linear};
use super::shift::{shift_round, shift_round_back};
use crate::error::{config_err, Result};
use crate::numerics::{Float, Graph, Init, ParamId, ParamStore, Scope, Tensor, Var};
use crate::ssm::{AtrousMamba, AtrousMambaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PvmKind {
    /// Four channel segments through one shared atrous Mamba.
    Plain,
    /// Channels rotated left by `C/8` before chunking, rotated back after.
    ShiftRound,
    /// Interior segment pairs as in shift round; the outer two `C/8`
    /// segments go through a second, narrower atrous Mamba.
    ShiftNoncircular,
}

/// Parallel vision Mamba layer on tokens `[B, L, C]`:
/// `Linear(LN(concat(mamba(segments)) + theta * x))` with the segments taken
/// from `LN(x)`.
#[derive(Clone, Debug)]
pub struct Pvm {
    pub kind: PvmKind,
    channels: usize,
    norm_in: LayerNorm,
    mamba: AtrousMamba,
    edge: Option<AtrousMamba>,
    theta: ParamId,
    norm_out: LayerNorm,
    proj: Linear,
}

impl Pvm {
    /// `mamba` is the template for the shared core; its `d_model` is set to
    /// `C/4` (and `C/8` for the edge core).
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        kind: PvmKind,
        c: usize,
        mamba: &AtrousMambaConfig,
        theta_init: f64,
        init: &mut Init,
    ) -> Result<Self> {
        let need = if kind == PvmKind::Plain { 4 } else { 8 };
        if c == 0 || c % need != 0 {
            return Err(config_err!("{:?} layer needs channels divisible by {}, got {}", kind, need, c));
        }
        let norm_in = LayerNorm::new(store, &scope.child("norm_in"), c)?;
        let core_cfg = AtrousMambaConfig { d_model: c / 4, ..mamba.clone() };
        let core = AtrousMamba::new(store, &scope.child("mamba"), core_cfg, init)?;
        let edge = if kind == PvmKind::ShiftNoncircular {
            let cfg = AtrousMambaConfig { d_model: c / 8, ..mamba.clone() };
            Some(AtrousMamba::new(store, &scope.child("edge_mamba"), cfg, init)?)
        } else {
            None
        };
        let theta = store.register(scope.name("theta"), Tensor::scalar(T::c(theta_init)))?;
        let norm_out = LayerNorm::new(store, &scope.child("norm_out"), c)?;
        let proj = Linear::new(store, &scope.child("proj"), c, c, init)?;
        Ok(Pvm { kind, channels: c, norm_in, mamba: core, edge, theta, norm_out, proj })
    }

    pub fn mamba(&self) -> &AtrousMamba {
        &self.mamba
    }

    pub fn theta(&self) -> ParamId {
        self.theta
    }

    /// Runs the shared core on equal-width channel segments, stacked along
    /// the batch axis so the core sees them as independent sequences.
    fn segments<T: Float>(
        g: &Graph<'_, T>,
        core: &AtrousMamba,
        segs: &[Var],
        h: usize,
        w: usize,
    ) -> Result<Vec<Var>> {
        let b = g.shape(segs[0])[0];
        let stacked = if segs.len() == 1 { segs[0] } else { g.concat(segs, 0)? };
        let out = core.forward(g, stacked, h, w)?;
        if segs.len() == 1 {
            return Ok(vec![out]);
        }
        (0..segs.len()).map(|i| g.narrow(out, 0, i * b, b)).collect()
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.channels;
        let n = self.norm_in.forward(g, x)?;
        let mixed = match self.kind {
            PvmKind::Plain => {
                let segs = g.chunk(n, 4, 2)?;
                g.concat(&Self::segments(g, &self.mamba, &segs, h, w)?, 2)?
            }
            PvmKind::ShiftRound => {
                let r = shift_round(g, n)?;
                let segs = g.chunk(r, 4, 2)?;
                let out = g.concat(&Self::segments(g, &self.mamba, &segs, h, w)?, 2)?;
                shift_round_back(g, out)?
            }
            PvmKind::ShiftNoncircular => {
                let e = c / 8;
                let first = g.narrow(n, 2, 0, e)?;
                let last = g.narrow(n, 2, c - e, e)?;
                let inner: Vec<Var> =
                    (0..3).map(|i| g.narrow(n, 2, e + i * 2 * e, 2 * e)).collect::<Result<_>>()?;
                let inner = Self::segments(g, &self.mamba, &inner, h, w)?;
                let edge = self.edge.as_ref().expect("edge core exists for the non-circular variant");
                let outer = Self::segments(g, edge, &[first, last], h, w)?;
                g.concat(&[outer[0], inner[0], inner[1], inner[2], outer[1]], 2)?
            }
        };
        let r = g.add(mixed, g.mul_scalar_var(x, g.param(self.theta))?)?;
        let r = self.norm_out.forward(g, r)?;
        self.proj.forward(g, r)
    }

    pub fn param_count(kind: PvmKind, c: usize, mamba: &AtrousMambaConfig) -> usize {
        let core = AtrousMambaConfig { d_model: c / 4, ..mamba.clone() }.param_count();
        let edge = match kind {
            PvmKind::ShiftNoncircular => AtrousMambaConfig { d_model: c / 8, ..mamba.clone() }.param_count(),
            _ => 0,
        };
        2 * c + core + edge + 1 + 2 * c + c * c + c
    }
}
