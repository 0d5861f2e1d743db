//! Hierarchical Gaussian-splatting refinement for scenes with several
//! interacting humans and objects.
//!
//! Each frame is built in three stages. Canonical templates are posed
//! (skinning for humans, rigid motion for objects). A per-instance
//! multi-view fusion network then refines appearance and local shape, and a
//! graph attention network over touching instances predicts interaction
//! residuals. The result is rendered with a differentiable tile rasterizer
//! and trained end to end against masked multi-view images.

pub mod deformation;
pub mod error;
pub mod fusion;
pub mod gaussians;
pub mod interaction;
pub mod linalg;
pub mod parallel;
pub mod pipeline;
pub mod rasterizer;
pub mod sceneio;

pub use error::{CheckpointError, DeformError, FusionError, GaussianError, InteractionError, PipelineError, SceneError};
pub use gaussians::{Camera, GaussianSet};
pub use parallel::Parallelism;
