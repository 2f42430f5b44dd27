//! Hourglass autoregressive model over mesh token sequences.
//!
//! Token-level blocks wrap progressively shortened inner stages (3x per
//! level); the upsampled inner stream is folded back with a causal shift so
//! information never flows from a later token to an earlier one. Attention
//! is windowed at every level, which bounds the decode cache. All math runs
//! in f64 through hand-written forward/backward passes; checkpoints store
//! f32.

pub mod backward;
pub mod checkpoint;
pub mod cond;
pub mod config;
pub mod decode;
pub mod forward;
pub mod params;
pub mod train;

pub use config::{CondConfig, HourglassConfig};
pub use params::{init_model, Grads, ParameterSet};
pub use train::{TrainConfig, TrainExample};
