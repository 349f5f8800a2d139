//! Rigid point cloud registration with attention-augmented point features.
//!
//! The crate is organized bottom-up:
//!
//! * [`geom`]: point clouds, rigid transforms, kNN, normals, Kabsch.
//! * [`data`]: synthetic registration pairs with ground truth, PLY I/O.
//! * [`tensor`]: dense tensors with reverse-mode differentiation.
//! * [`model`]: feature head, attention augmentation and the matcher.
//! * [`pipeline`]: end-to-end registration and an ICP baseline.
//! * [`train`]: loss, optimizer, checkpoints and the training loop.
//! * [`metrics`]: rotation/translation errors, clipped chamfer distance, recall.

pub mod error;
pub mod data;
pub mod geom;
pub mod model;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geom::{apply_transform, compose, PointCloud, RigidTransform};

/// Version recorded in every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
