use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on a tensor that does not require gradients")]
    NoGradient,
    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },
    #[error("parameter `{name}` has shape {actual:?} but optimizer state expects {expected:?}")]
    StateMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("function value is not finite ({value}) when perturbing coordinate {coord}")]
    NonFinite { coord: usize, value: f64 },
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Backward(#[from] GradError),
}
