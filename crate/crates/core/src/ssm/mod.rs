//! Selective state-space core (Mamba) and the scan-plan wrapper that feeds
//! it sub-image sequences.

mod atrous;
mod mamba;
mod selective;

pub use atrous::{AtrousMamba, AtrousMambaConfig, CoreKind};
pub use mamba::{Mamba, MambaConfig};
pub use selective::selective_scan;
