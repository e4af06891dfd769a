//! Desk-scale dense RGB-D SLAM on a neural implicit surface field.
//!
//! The map is a truncated signed distance field plus color, represented by a
//! fusion of two encodings: a global One-blob positional encoding and local
//! hierarchical axis-aligned feature planes. Per-point features from both are
//! combined by a small attention module and decoded by tiny MLPs; the decoder
//! outputs of the fused and the local-only branch are blended (result fusion).
//! Camera poses and field parameters are optimized jointly against rendered
//! color/depth, direct TSDF supervision along rays, a free-space term, and an
//! information-concentration term that penalizes rendered depth variance.
//!
//! Everything runs on a small f64 reverse-mode autodiff engine ([`tensor`]),
//! is deterministic for a fixed seed, and is verified against analytic
//! synthetic scenes ([`synth`]) instead of GPU-scale benchmarks.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod field;
pub mod frame;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod par;
pub mod pose;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod tum;

pub use error::{Error, Result};
