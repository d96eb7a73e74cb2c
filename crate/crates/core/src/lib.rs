//! Multi-scale point-based neural radiance field at desk scale.
//!
//! Point clouds are aggregated into a voxel hierarchy plus one global voxel;
//! each level carries learnable features (per-point vectors with an MLP on
//! fine levels, per-point tri-planes on coarse levels, a tri-plane for the
//! global voxel). Features from the levels that have neighbors near a sample
//! are averaged, decoded into density and color, and volume rendered. All
//! gradients come from the small reverse-mode tape in [`autodiff`].

pub mod autodiff;
pub mod config;
pub mod error;
pub mod field;
pub mod harness;
pub mod hierarchy;
pub mod pipeline;
pub mod renderer;
pub mod scene_io;
pub mod spatial_index;
pub mod trainer;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
