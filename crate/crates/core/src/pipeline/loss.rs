//! Photometric loss and image metrics.
//!
//! Images are row-major `[H, W, 3]` buffers with values in `[0, 1]`.

use mmgs_diffgrad::{Real, Tensor};
use serde::{Deserialize, Serialize};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Source index of every padded index along an axis of length `n`. Axes
/// shorter than the window are reflected (without repeating the edge) on
/// both sides.
fn reflect_map(n: usize) -> Vec<usize> {
    let padded = n.max(SSIM_WINDOW);
    let before = (padded - n) / 2;
    (0..padded)
        .map(|i| {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1) as isize;
            let mut s = (i as isize - before as isize).rem_euclid(period);
            if s >= n as isize {
                s = period - s;
            }
            s as usize
        })
        .collect()
}

/// Valid-mode separable filter of a `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (vh, vw) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * vw];
    for y in 0..h {
        for x0 in 0..vw {
            rows[y * vw + x0] = (0..SSIM_WINDOW).map(|k| taps[k] * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y0 in 0..vh {
        for x0 in 0..vw {
            out[y0 * vw + x0] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y0 + k) * vw + x0]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a valid-sized map back over the
/// full `h x w` plane.
fn filter_adjoint(g: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (vh, vw) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * vw];
    for y0 in 0..vh {
        for x0 in 0..vw {
            let v = g[y0 * vw + x0];
            for k in 0..SSIM_WINDOW {
                rows[(y0 + k) * vw + x0] += taps[k] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x0 in 0..vw {
            let v = rows[y * vw + x0];
            for k in 0..SSIM_WINDOW {
                out[y * w + x0 + k] += taps[k] * v;
            }
        }
    }
    out
}

struct SsimEval {
    value: f64,
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
}

/// Mean SSIM over channels and valid window positions, with the gradient
/// of that mean with respect to both inputs when `with_grad` is set.
fn ssim_eval(a: &[f64], b: &[f64], h: usize, w: usize, with_grad: bool) -> SsimEval {
    assert_eq!(a.len(), h * w * 3, "ssim: image size");
    assert_eq!(b.len(), a.len(), "ssim: shape mismatch");
    let taps = ssim_taps();
    let (rmap, cmap) = (reflect_map(h), reflect_map(w));
    let (ph, pw) = (rmap.len(), cmap.len());
    let (vh, vw) = (ph + 1 - SSIM_WINDOW, pw + 1 - SSIM_WINDOW);
    let count = (3 * vh * vw) as f64;
    let mut total = 0.0;
    let mut grad_a = if with_grad { vec![0.0; a.len()] } else { Vec::new() };
    let mut grad_b = grad_a.clone();
    for ch in 0..3 {
        let plane = |img: &[f64]| -> Vec<f64> {
            let mut p = Vec::with_capacity(ph * pw);
            for &r in &rmap {
                for &c in &cmap {
                    p.push(img[(r * w + c) * 3 + ch]);
                }
            }
            p
        };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, ph, pw, &taps);
        let my = filter_valid(&y, ph, pw, &taps);
        let exx = filter_valid(&prod(&x, &x), ph, pw, &taps);
        let eyy = filter_valid(&prod(&y, &y), ph, pw, &taps);
        let exy = filter_valid(&prod(&x, &y), ph, pw, &taps);
        let n = vh * vw;
        let (mut dmx, mut dmy, mut dxx, mut dyy, mut dxy) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if with_grad {
                let k = 1.0 / (b1 * b2);
                dmx[i] = (2.0 * uy * a2 - 2.0 * uy * a1) * k - 2.0 * ux * s / b1 + 2.0 * ux * s / b2;
                dmy[i] = (2.0 * ux * a2 - 2.0 * ux * a1) * k - 2.0 * uy * s / b1 + 2.0 * uy * s / b2;
                dxx[i] = -s / b2;
                dyy[i] = -s / b2;
                dxy[i] = 2.0 * a1 * k;
            }
        }
        if with_grad {
            let [fmx, fmy, fxx, fyy, fxy] = [dmx, dmy, dxx, dyy, dxy].map(|m| filter_adjoint(&m, ph, pw, &taps));
            for pr in 0..ph {
                for pc in 0..pw {
                    let q = pr * pw + pc;
                    let src = (rmap[pr] * w + cmap[pc]) * 3 + ch;
                    grad_a[src] += (fmx[q] + 2.0 * x[q] * fxx[q] + y[q] * fxy[q]) / count;
                    grad_b[src] += (fmy[q] + 2.0 * y[q] * fyy[q] + x[q] * fxy[q]) / count;
                }
            }
        }
    }
    SsimEval {
        value: total / count,
        grad_a,
        grad_b,
    }
}

/// Single-scale SSIM of two `[H, W, 3]` images: 11x11 Gaussian window with
/// sigma 1.5, averaged over channels and valid window positions. Images
/// smaller than the window are reflect-padded.
pub fn ssim_value(a: &[f64], b: &[f64], height: usize, width: usize) -> f64 {
    ssim_eval(a, b, height, width, false).value
}

/// Differentiable SSIM of two `[H, W, 3]` tensors.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "ssim: shape mismatch");
    let &[h, w, 3] = a.shape() else {
        panic!("ssim expects [H, W, 3] images, got {:?}", a.shape());
    };
    let af: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let bf: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let with_grad = a.requires_grad() || b.requires_grad();
    let e = ssim_eval(&af, &bf, h, w, with_grad);
    let (ga, gb) = (e.grad_a, e.grad_b);
    Tensor::from_op(
        "ssim",
        vec![],
        vec![T::of(e.value)],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g = g[0];
            vec![
                Some(ga.iter().map(|&v| g * T::of(v)).collect()),
                Some(gb.iter().map(|&v| g * T::of(v)).collect()),
            ]
        }),
    )
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr: length mismatch");
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    psnr_from_mse(mse)
}

/// PSNR over the pixels where `mask` is set (all three channels).
pub fn masked_psnr(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..3 {
                let d = a[p * 3 + c] - b[p * 3 + c];
                sum += d * d;
            }
            n += 3;
        }
    }
    psnr_from_mse(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Replaces everything outside the mask with black.
pub fn composite_masked(img: &[f64], mask: &[bool]) -> Vec<f64> {
    img.iter()
        .enumerate()
        .map(|(i, &v)| if mask[i / 3] { v } else { 0.0 })
        .collect()
}

/// SSIM of the mask-composited pair.
pub fn masked_ssim(a: &[f64], b: &[f64], mask: &[bool], height: usize, width: usize) -> f64 {
    ssim_value(&composite_masked(a, mask), &composite_masked(b, mask), height, width)
}

/// A perceptual image distance with gradients, e.g. LPIPS.
pub trait PerceptualLoss<T: Real> {
    fn distance(&self, rendered: &Tensor<T>, target: &Tensor<T>) -> Tensor<T>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 0.8,
            ssim: 0.2,
            lpips: 0.0,
        }
    }
}

/// The loss and its weighted parts.
pub struct LossTerms<T: Real> {
    pub total: Tensor<T>,
    pub l1: f64,
    pub ssim_term: f64,
    pub lpips_term: f64,
}

/// `l1 * L1 + ssim * (1 - SSIM) + lpips * LPIPS` restricted to `mask`.
///
/// L1 is the mean absolute difference over masked pixels; SSIM and the
/// perceptual term see both images with everything outside the mask set to
/// black. The perceptual term is skipped without a plugin.
pub fn render_loss<T: Real>(
    rendered: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss<T>>,
) -> LossTerms<T> {
    assert_eq!(rendered.shape(), target.shape(), "render_loss: shape mismatch");
    assert_eq!(mask.len() * 3, rendered.numel(), "render_loss: mask size");
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        log::warn!("empty loss mask; loss is zero");
        return LossTerms {
            total: Tensor::scalar(T::zero()),
            l1: 0.0,
            ssim_term: 0.0,
            lpips_term: 0.0,
        };
    }
    let m = Tensor::new(
        rendered.shape(),
        (0..rendered.numel())
            .map(|i| if mask[i / 3] { T::one() } else { T::zero() })
            .collect(),
    );
    let ra = rendered.mul(&m);
    let ta = target.mul(&m);
    let l1 = ra.sub(&ta).abs().sum().scale(T::of(1.0 / (3 * count) as f64));
    let mut total = l1.scale(T::of(weights.l1));
    let l1v = weights.l1 * l1.item().as_f64();
    let mut ssim_term = 0.0;
    if weights.ssim != 0.0 {
        let d = ssim(&ra, &ta).neg().add_scalar(T::one()).scale(T::of(weights.ssim));
        ssim_term = d.item().as_f64();
        total = total.add(&d);
    }
    let mut lpips_term = 0.0;
    if let (Some(p), true) = (perceptual, weights.lpips != 0.0) {
        let d = p.distance(&ra, &ta).scale(T::of(weights.lpips));
        lpips_term = d.item().as_f64();
        total = total.add(&d);
    }
    LossTerms {
        total,
        l1: l1v,
        ssim_term,
        lpips_term,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect_map(4), vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_map(12), (0..12).collect::<Vec<_>>());
        assert!(reflect_map(1).iter().all(|&i| i == 0));
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&[0.3; 6], &[0.3; 6]), PSNR_CAP);
    }

    #[test]
    fn taps_sum_to_one() {
        assert!((ssim_taps().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
