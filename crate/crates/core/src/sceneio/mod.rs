//! Scene and checkpoint persistence, and the synthetic scene generator.

pub mod checkpoint;
pub mod generate;
pub mod scene;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use generate::{build_synthetic_scene, generate_synthetic_scene, write_synthetic_scene, SyntheticScene, SyntheticSpec};
pub use scene::{load_scene, Frame, InstanceRecord, Scene};
