use std::path::PathBuf;

use mmgs_diffgrad::GradError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussianError {
    #[error("zero quaternion cannot be normalised")]
    ZeroQuaternion,
    #[error("SH degree {degree} is not supported (0..=3)")]
    ShDegree { degree: usize },
    #[error("SH degree {degree} needs {expected} coefficients, got {actual}")]
    ShCoefficientCount {
        degree: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("malformed Gaussian set: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeformError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} is not a rotation")]
    NotRotation(String),
    #[error("skinning weights of vertex {vertex} are invalid: {reason}")]
    Weights { vertex: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("cross-view fusion needs at least one view")]
    NoViews,
    #[error("feature shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InteractionError {
    #[error("instance has no Gaussians")]
    EmptyInstance,
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: mask value {value} does not match any instance")]
    MaskValue { path: PathBuf, value: u8 },
    #[error("{path}: image is {actual_width}x{actual_height}, camera expects {width}x{height}")]
    ImageSize {
        path: PathBuf,
        width: u32,
        height: u32,
        actual_width: u32,
        actual_height: u32,
    },
    #[error("invalid generator settings: {0}")]
    Generate(String),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Camera(#[from] GaussianError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("malformed checkpoint at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("checkpoint has no tensor named {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("loss became {value} at iteration {iteration}; parameter norms: {norms}")]
    NonFiniteLoss {
        iteration: usize,
        value: f64,
        norms: String,
    },
    #[error("frame {frame} has no pose for instance {instance}")]
    MissingPose { frame: usize, instance: u32 },
    #[error("camera {0} is not part of the scene")]
    UnknownCamera(u32),
    #[error("frame {0} is not part of the scene")]
    UnknownFrame(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
