//! Data ingestion, synthetic lesions, augmentation, BCE+Dice loss,
//! confusion-count metrics, AdamW with cosine annealing, and the training
//! and evaluation loops.

mod augment;
mod data;
mod loss;
mod metrics;
mod optim;
mod synth;
mod train;

pub use augment::{augment, Normalization, Transform};
pub use data::{load_dataset, save_dataset, Sample, MASK_THRESHOLD};
pub use loss::{bce_dice_loss, DICE_EPS, PROB_CLAMP};
pub use metrics::{compute_metrics, Metrics, THRESHOLD};
pub use optim::{cosine_lr, AdamW};
pub use synth::{synth_dataset, SynthStyle, FOREGROUND_RANGE};
pub use train::{append_log, evaluate, stack, write_log, EpochLog, TrainConfig, Trainer, LOG_HEADER};
