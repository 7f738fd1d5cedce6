use std::rc::Rc;

use super::mamba::{Mamba, MambaConfig};
use crate::error::{dim_err, Result};
use crate::numerics::{Float, Graph, Init, ParamStore, Scope, Var};
use crate::scan::{ScanSpec, StackOrder};

/// What runs on the scanned sequences. `Identity` is a test stub that
/// registers no parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CoreKind {
    #[default]
    Mamba,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtrousMambaConfig {
    pub d_model: usize,
    pub scan: ScanSpec,
    /// Template for the core; `d_model` and `groups` are overwritten.
    pub mamba: MambaConfig,
    pub stack_order: StackOrder,
    pub core: CoreKind,
}

impl AtrousMambaConfig {
    pub fn new(d_model: usize, scan: ScanSpec) -> Self {
        AtrousMambaConfig {
            d_model,
            scan,
            mamba: MambaConfig::new(d_model),
            stack_order: StackOrder::default(),
            core: CoreKind::Mamba,
        }
    }

    pub fn core_config(&self) -> MambaConfig {
        MambaConfig { d_model: self.d_model, groups: self.scan.sequences_per_image(), ..self.mamba.clone() }
    }

    pub fn param_count(&self) -> usize {
        match self.core {
            CoreKind::Mamba => self.core_config().param_count(),
            CoreKind::Identity => 0,
        }
    }
}

/// Scans a raster sequence with every plan of a [`ScanSpec`], runs one
/// shared core over all resulting sub-sequences (each scanned sequence has
/// its own selective-parameter bundle), scatters back and sums over plans.
#[derive(Clone, Debug)]
pub struct AtrousMamba {
    pub cfg: AtrousMambaConfig,
    core: Option<Mamba>,
}

impl AtrousMamba {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        cfg: AtrousMambaConfig,
        init: &mut Init,
    ) -> Result<Self> {
        cfg.scan.validate()?;
        let core = match cfg.core {
            CoreKind::Mamba => Some(Mamba::new(store, scope, cfg.core_config(), init)?),
            CoreKind::Identity => None,
        };
        Ok(AtrousMamba { cfg, core })
    }

    pub fn mamba(&self) -> Option<&Mamba> {
        self.core.as_ref()
    }

    /// `x [B, h*w, d_model]` in row-major raster order.
    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 3 || xs[1] != h * w || xs[2] != self.cfg.d_model {
            return Err(dim_err!(
                "atrous mamba: input {:?} for a {}x{} grid of width {}",
                xs,
                h,
                w,
                self.cfg.d_model
            ));
        }
        let batch = xs[0];
        let order = self.cfg.stack_order;
        let plans = self.cfg.scan.plans(h, w)?;
        let mut seqs = Vec::with_capacity(plans.len());
        let mut labels = Vec::new();
        for (pi, plan) in plans.iter().enumerate() {
            seqs.push(plan.gather(g, x, order)?);
            let base = pi * plan.num_sequences();
            labels.extend(plan.sequence_labels(batch, order).into_iter().map(|l| base + l));
        }
        let stacked = if seqs.len() == 1 { seqs[0] } else { g.concat(&seqs, 0)? };
        let out = match &self.core {
            Some(core) => core.forward_grouped(g, stacked, Rc::new(labels))?,
            None => stacked,
        };
        let mut merged: Option<Var> = None;
        let mut offset = 0;
        for plan in &plans {
            let rows = batch * plan.num_sequences();
            let part = if plans.len() == 1 { out } else { g.narrow(out, 0, offset, rows)? };
            offset += rows;
            let back = plan.scatter(g, part, order)?;
            merged = Some(match merged {
                Some(m) => g.add(m, back)?,
                None => back,
            });
        }
        Ok(merged.expect("a scan spec has at least one plan"))
    }
}
