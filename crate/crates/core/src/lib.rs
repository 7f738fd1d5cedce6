//! Atrous shifted parallel vision Mamba U-Net for binary lesion
//! segmentation, on a self-contained CPU tensor and autodiff substrate.

pub mod attention;
pub mod blocks;
pub mod error;
pub mod network;
pub mod numerics;
pub mod pipeline;
pub mod scan;
pub mod ssm;
pub mod verify;

pub use error::{Error, Result};
