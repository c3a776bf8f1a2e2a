//! Depth-anchored cross-view rotary position embeddings.
//!
//! Key tokens are lifted along their camera rays at fixed depth anchors
//! (one anchor per attention head group), projected into the query camera,
//! and rotated with ordinary 2D rotary embeddings at the projected pixel.
//! Queries rotate at their own pixel. Because both rotations happen before
//! the kernel, the attention call itself is a plain SDPA.
//!
//! Modules:
//!
//! * [`geometry`]: pinhole cameras, rays, lifting, projection, epipolar
//!   helpers and rigid world transforms.
//! * [`rope`]: rotary kernels over 1/2/3/6 axes and depth-anchor schedules.
//! * [`attention`]: anchor assignment, query/key encoding, SDPA forward and
//!   backward, the view-batched multiview pipeline and 2D-3D attention.
//! * [`scene`]: seeded camera rigs and patch grids.
//! * [`analysis`]: head entropy, dominant heads and bias heatmaps.
//! * [`config`], [`io`]: run configuration and file formats.
//! * [`oracle`]: slow pairwise reference implementations.
//! * [`selftest`]: the checks behind `urope selftest`.

pub mod analysis;
pub mod attention;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod oracle;
pub mod rope;
pub mod scene;
pub mod selftest;

pub use error::{Error, Result};
