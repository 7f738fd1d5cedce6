//! Composite blocks: parallel vision Mamba layers (plain, shift round,
//! non-circular shift), the CNN branch, SE and SK attention, and the
//! two-repeat ASP block.

mod asp;
mod fusion;
mod cnn;
mod pvm;
mod shift;

pub use asp::{AspBlock, BlockConfig, BlockFlags, ScanKind};
pub use fusion::{SeBlock, SkBlock};
pub(crate) use fusion::Linear;
pub use cnn::CnnBranch;
pub use pvm::{Pvm, PvmKind};
pub use shift::{rotate_channels, shift_round, shift_round_back};

use crate::error::Result;
use crate::numerics::{Float, Graph, Var};

/// `[B, C, H, W] -> [B, H*W, C]`
pub fn image_to_tokens<T: Float>(g: &Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let y = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(y, &[s[0], s[2] * s[3], s[1]])
}

/// `[B, H*W, C] -> [B, C, H, W]`
pub fn tokens_to_image<T: Float>(g: &Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x);
    let y = g.reshape(x, &[s[0], h, w, s[2]])?;
    g.permute(y, &[0, 3, 1, 2])
}
