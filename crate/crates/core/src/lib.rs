//! Mesh-sequence modeling toolkit: tokenization of triangle meshes into
//! canonically ordered coordinate streams, an order-enforcing decoder FSM,
//! point-cloud conditioning inputs, an hourglass autoregressive model with
//! rolling-cache inference, and evaluation/cost instrumentation.

pub mod bvh;
pub mod error;
pub mod eval;
pub mod kdtree;
pub mod mesh;
pub mod model;
pub mod mtok;
pub mod obj;
pub mod order_fsm;
pub mod par;
pub mod pointcloud;
pub mod procgen;
pub mod sequencer;

pub use error::{Error, Result};
