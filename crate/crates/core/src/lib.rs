//! Synthetic auto-labeling and object perception from splat assets.
//!
//! The pipeline renders a procedural or imported splat object over splat
//! environments from randomized viewpoints, records masks and object poses,
//! trains a small mask + gated pose network, compares it with a PnP baseline
//! and serves the trained model over a framed stream protocol.

pub mod autodiff;
pub mod datagen;
pub mod eval;
pub mod geometry;
pub mod perception;
pub mod pipeline;
pub mod pnp;
pub mod renderer;
pub mod rng;
pub mod service;
pub mod splats;

pub use geometry::{Intrinsics, Pose, Vec2, Vec3};
pub use renderer::{Image, Lighting, RenderOutput};
pub use splats::{Archetype, Scene, Splat, SplatAsset, Symmetry};
