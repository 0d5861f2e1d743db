//! Front-to-back compositing of one tile and its adjoint.

use mmgs_diffgrad::Real;

use super::preprocess::{Splat, SplatGrad};
use super::RasterOptions;

/// Forward results for one tile, row-major over the tile's clipped pixels.
pub(crate) struct TileForward<T> {
    pub color: Vec<[T; 3]>,
    pub transmittance: Vec<T>,
    /// Number of list entries consumed before compositing stopped.
    pub consumed: Vec<u32>,
}

#[inline]
fn falloff<T: Real>(sp: &Splat<T>, px: T, py: T) -> (T, T, T) {
    let dx = px - sp.mean[0];
    let dy = py - sp.mean[1];
    let half = T::of(0.5);
    let power = -half * (sp.conic[0] * dx * dx + sp.conic[2] * dy * dy) - sp.conic[1] * dx * dy;
    (power, dx, dy)
}

pub(crate) fn forward<T: Real>(
    list: &[u32],
    splats: &[Option<Splat<T>>],
    bounds: (u32, u32, u32, u32),
    background: [T; 3],
    opts: &RasterOptions,
) -> TileForward<T> {
    let (x0, x1, y0, y1) = bounds;
    let n = ((x1 - x0) * (y1 - y0)) as usize;
    let mut out = TileForward {
        color: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        consumed: Vec::with_capacity(n),
    };
    let entries: Vec<&Splat<T>> = list
        .iter()
        .map(|&i| splats[i as usize].as_ref().expect("binned splat is visible"))
        .collect();
    let max_alpha = T::of(opts.max_alpha);
    let min_t = T::of(opts.min_transmittance);
    for py in y0..y1 {
        for px in x0..x1 {
            let (fx, fy) = (T::of(px as f64), T::of(py as f64));
            let mut t = T::one();
            let mut c = [T::zero(); 3];
            let mut consumed = 0u32;
            for (j, sp) in entries.iter().enumerate() {
                let (power, _, _) = falloff(sp, fx, fy);
                if power > T::zero() {
                    continue;
                }
                let sigma = (sp.opacity * power.exp()).min(max_alpha);
                let next = t * (T::one() - sigma);
                if opts.early_termination && next < min_t {
                    break;
                }
                for ch in 0..3 {
                    c[ch] += sp.color[ch] * sigma * t;
                }
                t = next;
                consumed = j as u32 + 1;
            }
            for ch in 0..3 {
                c[ch] += t * background[ch];
            }
            out.color.push(c);
            out.transmittance.push(t);
            out.consumed.push(consumed);
        }
    }
    out
}

/// Returns one gradient per list entry, aligned with `list`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    list: &[u32],
    splats: &[Option<Splat<T>>],
    bounds: (u32, u32, u32, u32),
    width: u32,
    background: [T; 3],
    opts: &RasterOptions,
    fwd: &TileForward<T>,
    d_image: &[T],
) -> Vec<SplatGrad<T>> {
    let (x0, x1, y0, y1) = bounds;
    let mut grads = vec![SplatGrad::zero(); list.len()];
    let entries: Vec<&Splat<T>> = list
        .iter()
        .map(|&i| splats[i as usize].as_ref().expect("binned splat is visible"))
        .collect();
    let max_alpha = T::of(opts.max_alpha);
    let tw = (x1 - x0) as usize;
    for py in y0..y1 {
        for px in x0..x1 {
            let local = (py - y0) as usize * tw + (px - x0) as usize;
            let pix = (py * width + px) as usize * 3;
            let dpix = [d_image[pix], d_image[pix + 1], d_image[pix + 2]];
            if dpix.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let (fx, fy) = (T::of(px as f64), T::of(py as f64));
            let mut t = fwd.transmittance[local];
            let mut suffix = background.map(|b| b * t);
            for j in (0..fwd.consumed[local] as usize).rev() {
                let sp = entries[j];
                let (power, dx, dy) = falloff(sp, fx, fy);
                if power > T::zero() {
                    continue;
                }
                let g = power.exp();
                let raw = sp.opacity * g;
                let sigma = raw.min(max_alpha);
                let one_minus = T::one() - sigma;
                let t_j = t / one_minus;
                let gr = &mut grads[j];
                let mut d_sigma = T::zero();
                for ch in 0..3 {
                    gr.color[ch] += dpix[ch] * sigma * t_j;
                    d_sigma += dpix[ch] * (sp.color[ch] * t_j - suffix[ch] / one_minus);
                    suffix[ch] += sp.color[ch] * sigma * t_j;
                }
                t = t_j;
                if raw < max_alpha {
                    gr.opacity += d_sigma * g;
                    let d_power = d_sigma * raw;
                    gr.mean[0] += d_power * (sp.conic[0] * dx + sp.conic[1] * dy);
                    gr.mean[1] += d_power * (sp.conic[1] * dx + sp.conic[2] * dy);
                    let half = T::of(0.5);
                    gr.conic[0] -= d_power * half * dx * dx;
                    gr.conic[1] -= d_power * dx * dy;
                    gr.conic[2] -= d_power * half * dy * dy;
                }
            }
        }
    }
    grads
}
