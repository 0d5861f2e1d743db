use crate::error::GradCheckError;
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn report(coords: Vec<usize>, analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheckReport {
    let mut max_rel_error = 0.0;
    let mut worst_coord = coords.first().copied().unwrap_or(0);
    for ((&c, a), n) in coords.iter().zip(&analytic).zip(&numeric) {
        let e = (a - n).abs() / n.abs().max(1.0);
        if e > max_rel_error {
            max_rel_error = e;
            worst_coord = c;
        }
    }
    GradCheckReport {
        max_rel_error,
        worst_coord,
        coords,
        analytic,
        numeric,
    }
}

fn finite(coord: usize, v: f64) -> Result<f64, GradCheckError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GradCheckError::NonFinite { coord, value: v })
    }
}

/// Checks the gradient of scalar `f` at `point` with central differences
/// `(f(x + h) - f(x - h)) / 2h` on every coordinate.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    point: &Tensor<f64>,
    step: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if !(step > 0.0) {
        return Err(GradCheckError::BadStep(step));
    }
    let x = point.to_param();
    let y = f(&x);
    finite(0, y.item())?;
    let analytic = if y.requires_grad() {
        y.backward()?;
        x.grad().unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        vec![0.0; x.numel()]
    };

    let base = point.to_vec();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + step;
        let fp = finite(i, f(&Tensor::new(point.shape(), v.clone())).item())?;
        v[i] = base[i] - step;
        let fm = finite(i, f(&Tensor::new(point.shape(), v)).item())?;
        numeric.push((fp - fm) / (2.0 * step));
    }
    Ok(report((0..base.len()).collect(), analytic, numeric))
}

/// Checks the gradient of `f` with respect to a parameter it closes over,
/// perturbing the parameter in place on the listed coordinates (all when
/// `coords` is `None`). The parameter's values are restored afterwards and
/// its gradient is left cleared.
pub fn grad_check_param(
    param: &Tensor<f64>,
    f: impl Fn() -> Tensor<f64>,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport, GradCheckError> {
    if !(step > 0.0) {
        return Err(GradCheckError::BadStep(step));
    }
    let coords: Vec<usize> = coords
        .map(|c| c.to_vec())
        .unwrap_or_else(|| (0..param.numel()).collect());
    param.clear_grad();
    let y = f();
    finite(0, y.item())?;
    let full = if y.requires_grad() {
        y.backward()?;
        param.grad().unwrap_or_else(|| vec![0.0; param.numel()])
    } else {
        vec![0.0; param.numel()]
    };
    drop(y);
    param.clear_grad();
    let analytic = coords.iter().map(|&c| full[c]).collect();

    let base = param.to_vec();
    let mut numeric = Vec::with_capacity(coords.len());
    let mut result = Ok(());
    for &c in &coords {
        let mut v = base.clone();
        v[c] = base[c] + step;
        param.set_data(v.clone());
        let fp = f().item();
        v[c] = base[c] - step;
        param.set_data(v);
        let fm = f().item();
        if let Err(e) = finite(c, fp).and_then(|_| finite(c, fm)) {
            result = Err(e);
            break;
        }
        numeric.push((fp - fm) / (2.0 * step));
    }
    param.set_data(base);
    param.clear_grad();
    result?;
    Ok(report(coords, analytic, numeric))
}
