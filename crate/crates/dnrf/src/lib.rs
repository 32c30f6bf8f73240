//! Mesh-guided dynamic neural radiance field.
//!
//! A deforming triangle mesh guides the canonicalization of ray samples:
//! each sample taken in the per-frame deformed space is mapped into a fixed
//! canonical space through blended per-triangle Frenet-frame transforms, and
//! the radiance field (multi-resolution hash grid + two small MLPs) is
//! queried there. Rendering is alpha-composited volumetric integration with
//! occupancy-grid empty-space skipping; training couples a Huber color loss
//! with a mesh-depth prior.
//!
//! Modules mirror the pipeline stages:
//! - [`geometry`]: meshes, Frenet frames, deformation gradients, blending.
//! - [`bvh`]: nearest-triangle queries in deformed space.
//! - [`encoding`]: hash-grid position encoding and SH view encoding.
//! - [`network`]: density/color MLPs, reverse-mode gradients, Adam + EMA.
//! - [`field`]: the radiance-field abstraction the renderer samples.
//! - [`renderer`]: rays, occupancy grid, marching, compositing.
//! - [`trainer`]: losses, the optimization loop, expression transfer.
//! - [`dataset`]: scene files, synthetic scene generation, checkpoints.

pub mod bvh;
pub mod dataset;
pub mod encoding;
pub mod field;
pub mod geometry;
pub mod images;
pub mod metrics;
pub mod network;
pub mod renderer;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;
