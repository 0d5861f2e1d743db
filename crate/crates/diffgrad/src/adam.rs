use crate::error::GradError;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub shapes: Vec<Vec<usize>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            shapes: Vec::new(),
            step_count: 0,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        }
    }
}

/// One bias-corrected Adam update over `params`, which must all carry
/// gradients. Gradients are cleared afterwards.
///
/// The parameter list must be the same (in order and shape) on every call
/// with a given state.
pub fn adam_step<T: Real>(params: &[Tensor<T>], state: &mut AdamState<T>) -> Result<(), GradError> {
    if state.first_moment.is_empty() && state.step_count == 0 {
        state.first_moment = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        state.second_moment = state.first_moment.clone();
        state.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
    }
    for (i, p) in params.iter().enumerate() {
        let expected = state.shapes.get(i).cloned().unwrap_or_default();
        if state.shapes.len() != params.len() || expected != p.shape() {
            return Err(GradError::StateMismatch {
                name: p.name(),
                expected,
                actual: p.shape().to_vec(),
            });
        }
        if p.grad().is_none() {
            return Err(GradError::MissingGrad { name: p.name() });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let lr = T::of(state.lr);
    let eps = T::of(state.eps);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for (i, p) in params.iter().enumerate() {
        let g = p.grad().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        p.update_data(|data| {
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        p.clear_grad();
    }
    Ok(())
}
