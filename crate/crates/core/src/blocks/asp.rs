use serde::{Deserialize, Serialize};

use super::fusion::{SeBlock, SkBlock};
use super::cnn::CnnBranch;
use super::pvm::{Pvm, PvmKind};
use super::{image_to_tokens, tokens_to_image};
use crate::error::{config_err, dim_err, Result};
use crate::numerics::{Float, Graph, Init, ParamStore, Scope, Var};
use crate::scan::{ScanSpec, StackOrder};
use crate::ssm::{AtrousMambaConfig, CoreKind};

/// Ablation switches of one ASP block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockFlags {
    pub shift: bool,
    pub shift_round: bool,
    pub atrous: bool,
    pub cnn: bool,
    pub se: bool,
    pub sk: bool,
}

impl Default for BlockFlags {
    fn default() -> Self {
        BlockFlags { shift: false, shift_round: true, atrous: true, cnn: true, se: true, sk: true }
    }
}

impl BlockFlags {
    pub fn none() -> Self {
        BlockFlags { shift: false, shift_round: false, atrous: false, cnn: false, se: false, sk: false }
    }

    /// The component ablation ladder: nothing, Shift, SR, SR+AS, then the
    /// CNN branch with neither, either or both of SE and SK.
    pub fn ablation_rows() -> [BlockFlags; 8] {
        let none = Self::none();
        let sr_as = BlockFlags { shift_round: true, atrous: true, ..none };
        let cnn = BlockFlags { cnn: true, ..sr_as };
        [
            none,
            BlockFlags { shift: true, ..none },
            BlockFlags { shift_round: true, ..none },
            sr_as,
            cnn,
            BlockFlags { se: true, ..cnn },
            BlockFlags { sk: true, ..cnn },
            BlockFlags::default(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift && self.shift_round {
            return Err(config_err!("flags `shift` and `shift_round` are mutually exclusive"));
        }
        if self.sk && !self.cnn {
            return Err(config_err!("flag `sk` fuses the CNN branch and requires `cnn`"));
        }
        Ok(())
    }

    /// Short label such as `SR+AS+CNN+SE+SK`, `none` when all are off.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.shift, "Shift"),
            (self.shift_round, "SR"),
            (self.atrous, "AS"),
            (self.cnn, "CNN"),
            (self.se, "SE"),
            (self.sk, "SK"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect();
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// How the Mamba cores sample and traverse the patch grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    /// Single top-left horizontal raster.
    #[default]
    Vallian,
    /// Four directions, summed.
    Across,
    /// Step-2 atrous sampling with two horizontal and two vertical
    /// sub-images (ignores the step and the atrous flag).
    Efficient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub atrous_step: usize,
    pub theta_init: f64,
    pub flags: BlockFlags,
    pub scan: ScanKind,
    pub se_reduction: usize,
    pub sk_reduction: usize,
    pub stack_order: StackOrder,
    pub core: CoreKind,
}

impl BlockConfig {
    pub fn new(channels: usize) -> Self {
        BlockConfig {
            channels,
            atrous_step: 2,
            theta_init: 1.0,
            flags: BlockFlags::default(),
            scan: ScanKind::Vallian,
            se_reduction: 4,
            sk_reduction: 4,
            stack_order: StackOrder::default(),
            core: CoreKind::Mamba,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.channels == 0 || self.channels % 8 != 0 {
            return Err(config_err!("block channels must be a positive multiple of 8, got {}", self.channels));
        }
        if self.atrous_step == 0 {
            return Err(config_err!("atrous step must be >= 1"));
        }
        if self.se_reduction == 0 || self.sk_reduction == 0 {
            return Err(config_err!("SE/SK reductions must be >= 1"));
        }
        Ok(())
    }

    /// Effective scan step: 1 when the atrous flag is off.
    pub fn step(&self) -> usize {
        if self.flags.atrous {
            self.atrous_step
        } else {
            1
        }
    }

    pub fn scan_spec(&self) -> ScanSpec {
        match self.scan {
            ScanKind::Vallian => ScanSpec::atrous(self.step()),
            ScanKind::Across => ScanSpec::across(self.step()),
            ScanKind::Efficient => ScanSpec::efficient(),
        }
    }

    pub fn mamba_config(&self) -> AtrousMambaConfig {
        let mut cfg = AtrousMambaConfig::new(self.channels / 4, self.scan_spec());
        cfg.stack_order = self.stack_order;
        cfg.core = self.core;
        cfg
    }

    /// Layer used in the second repeat.
    pub fn second_kind(&self) -> PvmKind {
        if self.flags.shift_round {
            PvmKind::ShiftRound
        } else if self.flags.shift {
            PvmKind::ShiftNoncircular
        } else {
            PvmKind::Plain
        }
    }

    pub fn param_count(&self) -> usize {
        let (c, f) = (self.channels, self.flags);
        let am = self.mamba_config();
        let mut total = 0;
        for kind in [PvmKind::Plain, self.second_kind()] {
            total += Pvm::param_count(kind, c, &am);
            if f.cnn {
                total += CnnBranch::param_count(c);
            }
            if f.se {
                total += SeBlock::param_count(c, self.se_reduction);
            }
            if f.sk {
                total += SkBlock::param_count(c, self.sk_reduction);
            }
        }
        total
    }
}

#[derive(Clone, Debug)]
struct Repeat {
    pvm: Pvm,
    cnn: Option<CnnBranch>,
    se: Option<SeBlock>,
    sk: Option<SkBlock>,
}

/// Two repeats of (Mamba branch, CNN branch) -> shared SE -> SK fusion on
/// `[B, C, H, W]`; the first repeat uses the plain layer, the second the
/// shift-round layer (per flags).
#[derive(Clone, Debug)]
pub struct AspBlock {
    pub cfg: BlockConfig,
    repeats: [Repeat; 2],
}

impl AspBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, scope: &Scope, cfg: BlockConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let (c, f) = (cfg.channels, cfg.flags);
        let am = cfg.mamba_config();
        let mut build = |i: usize, kind: PvmKind| -> Result<Repeat> {
            let sc = scope.child(format!("rep{}", i));
            Ok(Repeat {
                pvm: Pvm::new(store, &sc.child("pvm"), kind, c, &am, cfg.theta_init, init)?,
                cnn: f.cnn.then(|| CnnBranch::new(store, &sc.child("cnn"), c, init)).transpose()?,
                se: f.se.then(|| SeBlock::new(store, &sc.child("se"), c, cfg.se_reduction, init)).transpose()?,
                sk: f.sk.then(|| SkBlock::new(store, &sc.child("sk"), c, cfg.sk_reduction, init)).transpose()?,
            })
        };
        let first = build(0, PvmKind::Plain)?;
        let second = build(1, cfg.second_kind())?;
        Ok(AspBlock { cfg, repeats: [first, second] })
    }

    pub fn pvm(&self, repeat: usize) -> &Pvm {
        &self.repeats[repeat].pvm
    }

    pub fn se(&self, repeat: usize) -> Option<&SeBlock> {
        self.repeats[repeat].se.as_ref()
    }

    pub fn sk(&self, repeat: usize) -> Option<&SkBlock> {
        self.repeats[repeat].sk.as_ref()
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(dim_err!("asp block: input {:?} for {} channels", s, self.cfg.channels));
        }
        let (h, w) = (s[2], s[3]);
        let mut t = image_to_tokens(g, x)?;
        for rep in &self.repeats {
            let mut m = rep.pvm.forward(g, t, h, w)?;
            let mut local = match &rep.cnn {
                Some(cnn) => {
                    let img = tokens_to_image(g, t, h, w)?;
                    Some(image_to_tokens(g, cnn.forward(g, img)?)?)
                }
                None => None,
            };
            if let Some(se) = &rep.se {
                m = se.forward(g, m)?;
                local = local.map(|l| se.forward(g, l)).transpose()?;
            }
            t = match (local, &rep.sk) {
                (Some(l), Some(sk)) => sk.forward(g, m, l)?,
                (Some(l), None) => g.add(m, l)?,
                (None, _) => m,
            };
        }
        tokens_to_image(g, t, h, w)
    }
}
