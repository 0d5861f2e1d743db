//! Per-instance multi-view fusion.
//!
//! Image features from a few context views are sampled at every posed
//! Gaussian center, joined with the Gaussian's current attributes, blended
//! across views and decoded into residual updates of colour, opacity,
//! rotation and scale. Centers are left untouched.

use mmgs_diffgrad::nn::{Conv3x3, Init, Linear, Mlp, Module};
use mmgs_diffgrad::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::FusionError;
use crate::gaussians::{num_bases, Camera};
use crate::linalg::Vec3;
use crate::rasterizer::GaussianTensors;

/// Channels of the encoder's feature maps.
pub const FEATURE_CHANNELS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight of the other views in each view's blended hypothesis.
    pub gamma: f64,
    pub context_views: usize,
    pub instance_feature_dim: usize,
    /// When set, a view only contributes to a Gaussian's neighbour sum if
    /// the Gaussian passes a depth test in that view, with this tolerance in
    /// scene units.
    pub visibility_tolerance: Option<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            gamma: 0.1,
            context_views: 4,
            instance_feature_dim: 64,
            visibility_tolerance: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.gamma >= 0.0) {
            return Err(FusionError::Shape(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.context_views == 0 {
            return Err(FusionError::NoViews);
        }
        if self.instance_feature_dim == 0 {
            return Err(FusionError::Shape("instance feature dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Width of a per-view, per-Gaussian feature: lifted image features, all SH
/// coefficients, opacity, unit quaternion and scale.
pub fn view_feature_dim(sh_degree: usize) -> usize {
    FEATURE_CHANNELS + 3 * num_bases(sh_degree) + 1 + 4 + 3
}

/// Width of the decoder's per-Gaussian residual output.
pub fn residual_dim(sh_degree: usize) -> usize {
    3 * num_bases(sh_degree) + 1 + 4 + 3
}

/// Three 3x3 convolutions, `3 -> 16 -> 32 -> 32`, ReLU after the first two.
#[derive(Debug, Clone)]
pub struct ImageEncoder<T: Real> {
    pub layers: [Conv3x3<T>; 3],
}

impl<T: Real> ImageEncoder<T> {
    pub fn new(rng: &mut impl Rng) -> Self {
        ImageEncoder {
            layers: [
                Conv3x3::new(3, 16, rng),
                Conv3x3::new(16, 32, rng),
                Conv3x3::new(32, FEATURE_CHANNELS, rng),
            ],
        }
    }

    /// `[H, W, 3]` image to a `[H, W, 32]` feature map.
    pub fn encode(&self, image: &Tensor<T>) -> Tensor<T> {
        let h = self.layers[0].forward(image).relu();
        let h = self.layers[1].forward(&h).relu();
        self.layers[2].forward(&h)
    }
}

impl<T: Real> Module<T> for ImageEncoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&format!("{prefix}.conv{i}"), out);
        }
    }
}

/// Bilinear taps of a continuous pixel position; `None` outside the image
/// area `[-0.5, W - 0.5) x [-0.5, H - 0.5)`. Positions between the outer
/// pixel centres and the image border take the border value.
fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> Option<[(usize, f64); 4]> {
    let (w, h) = (width as f64, height as f64);
    if !(u >= -0.5 && u < w - 0.5 && v >= -0.5 && v < h - 0.5) {
        return None;
    }
    let axis = |p: f64, n: usize| -> (usize, usize, f64) {
        let p = p.clamp(0.0, (n - 1) as f64);
        let i0 = (p.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let (x0, x1, fx) = axis(u, width);
    let (y0, y1, fy) = axis(v, height);
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

/// Samples an `[H, W, C]` feature map at the projection of every center.
/// Centers behind the camera or outside the image get the zero vector.
/// Gradients reach the feature map; centers are constants here.
pub fn lift_features<T: Real>(feature_map: &Tensor<T>, centers: &[Vec3<T>], cam: &Camera) -> Tensor<T> {
    let &[h, w, c] = feature_map.shape() else {
        panic!("lift_features expects an [h, w, c] map, got {:?}", feature_map.shape());
    };
    assert_eq!((w as u32, h as u32), (cam.width, cam.height), "feature map does not match the camera");
    let taps: Vec<Option<[(usize, T); 4]>> = centers
        .iter()
        .map(|&p| {
            let ([u, v], _) = cam.project_point(p)?;
            bilinear_taps(u.as_f64(), v.as_f64(), w, h).map(|t| t.map(|(i, wt)| (i, T::of(wt))))
        })
        .collect();
    let f = feature_map.data();
    let mut out = vec![T::zero(); centers.len() * c];
    for (row, t) in out.chunks_mut(c).zip(&taps) {
        let Some(t) = t else { continue };
        for &(idx, wt) in t {
            for (o, &v) in row.iter_mut().zip(&f[idx * c..(idx + 1) * c]) {
                *o += wt * v;
            }
        }
    }
    drop(f);
    let n = h * w * c;
    Tensor::from_op(
        "lift_features",
        vec![centers.len(), c],
        out,
        vec![feature_map.clone()],
        Box::new(move |g| {
            let mut df = vec![T::zero(); n];
            for (row, t) in g.chunks(c).zip(&taps) {
                let Some(t) = t else { continue };
                for &(idx, wt) in t {
                    for (d, &gv) in df[idx * c..(idx + 1) * c].iter_mut().zip(row) {
                        *d += wt * gv;
                    }
                }
            }
            vec![Some(df)]
        }),
    )
}

/// Per-point depth test against a point-splat depth buffer of `occluders`
/// (nearest pixel, smallest depth). A point passes when it projects inside
/// the image and lies within `tolerance` of the buffer.
pub fn depth_visibility(points: &[Vec3<f64>], occluders: &[Vec3<f64>], cam: &Camera, tolerance: f64) -> Vec<bool> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let pixel = |p: Vec3<f64>| -> Option<(usize, f64)> {
        let ([u, v], z) = cam.project_point(p)?;
        let (x, y) = (u.round(), v.round());
        (x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64).then(|| (y as usize * w + x as usize, z))
    };
    let mut zbuf = vec![f64::INFINITY; w * h];
    for &p in occluders {
        if let Some((i, z)) = pixel(p) {
            zbuf[i] = zbuf[i].min(z);
        }
    }
    points
        .iter()
        .map(|&p| pixel(p).is_some_and(|(i, z)| z <= zbuf[i] + tolerance))
        .collect()
}

/// Ranks camera ids by the instance's mask area, largest first, ties by
/// ascending id, and keeps the first `count`.
pub fn select_context_views(mask_areas: &[(u32, usize)], count: usize) -> Vec<u32> {
    let mut ranked = mask_areas.to_vec();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if ranked.iter().all(|&(_, area)| area == 0) && !ranked.is_empty() {
        log::warn!("instance is not visible in any view; using the first {count} cameras");
    }
    ranked.into_iter().take(count).map(|(id, _)| id).collect()
}

/// Weight of each view's feature in the fused result for one Gaussian.
///
/// `visible[p]` says whether view `p` may contribute to the other views'
/// neighbour sums; all views do when `None`. The normaliser of view `j` is
/// one plus `gamma` times the size of its neighbour set, so the weights sum
/// to one.
pub fn fusion_coefficients(views: usize, gamma: f64, visible: Option<&[bool]>) -> Vec<f64> {
    let vis = |p: usize| visible.map_or(true, |v| v[p]);
    let mut coef = vec![0.0; views];
    for j in 0..views {
        let neighbours: Vec<usize> = (0..views).filter(|&p| p != j && vis(p)).collect();
        let z = 1.0 + gamma * neighbours.len() as f64;
        coef[j] += 1.0 / z;
        for p in neighbours {
            coef[p] += gamma / z;
        }
    }
    coef.iter().map(|c| c / views as f64).collect()
}

/// Blends `[G, D]` per-view features into one `[G, D]` feature:
/// `(1/N) sum_j (f_j + gamma sum_{p != j} f_p) / Z_j`, evaluated term by term.
/// `visible[g][p]` restricts the neighbour sums per Gaussian.
pub fn cross_view_fuse<T: Real>(
    per_view: &[Tensor<T>],
    gamma: f64,
    visible: Option<&[Vec<bool>]>,
) -> Result<Tensor<T>, FusionError> {
    let Some(first) = per_view.first() else {
        return Err(FusionError::NoViews);
    };
    let &[g, d] = first.shape() else {
        return Err(FusionError::Shape(format!("expected [G, D] features, got {:?}", first.shape())));
    };
    if let Some(bad) = per_view.iter().find(|t| t.shape() != [g, d]) {
        return Err(FusionError::Shape(format!("view features {:?} vs {:?}", bad.shape(), [g, d])));
    }
    if let Some(v) = visible {
        if v.len() != g || v.iter().any(|row| row.len() != per_view.len()) {
            return Err(FusionError::Shape("visibility table does not match the features".into()));
        }
    }
    let n = per_view.len();
    let data: Vec<Vec<T>> = per_view.iter().map(|t| t.to_vec()).collect();
    let gm = T::of(gamma);
    let mut out = vec![T::zero(); g * d];
    let mut coefs = Vec::with_capacity(g * n);
    let mut inner = vec![T::zero(); d];
    for i in 0..g {
        let vis = |p: usize| visible.map_or(true, |v| v[i][p]);
        let acc = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            inner.fill(T::zero());
            let mut others = 0usize;
            for p in (0..n).filter(|&p| p != j && vis(p)) {
                others += 1;
                for (s, &v) in inner.iter_mut().zip(&data[p][i * d..(i + 1) * d]) {
                    *s += v;
                }
            }
            let z = T::one() + gm * T::of(others as f64);
            for ((a, &s), &own) in acc.iter_mut().zip(&inner).zip(&data[j][i * d..(i + 1) * d]) {
                *a += (own + gm * s) / z;
            }
        }
        let nn = T::of(n as f64);
        acc.iter_mut().for_each(|a| *a /= nn);
        let row: Option<Vec<bool>> = visible.map(|v| v[i].clone());
        coefs.extend(fusion_coefficients(n, gamma, row.as_deref()).into_iter().map(T::of));
    }
    Ok(Tensor::from_op(
        "cross_view_fuse",
        vec![g, d],
        out,
        per_view.to_vec(),
        Box::new(move |grad| {
            (0..n)
                .map(|p| {
                    let mut dp = vec![T::zero(); g * d];
                    for i in 0..g {
                        let a = coefs[i * n + p];
                        for (x, &gv) in dp[i * d..(i + 1) * d].iter_mut().zip(&grad[i * d..(i + 1) * d]) {
                            *x = a * gv;
                        }
                    }
                    Some(dp)
                })
                .collect()
        }),
    ))
}

/// `[G, D_vd]` features of one view: lifted features followed by the
/// activated attributes (raw SH, opacity, unit quaternion, scale).
pub fn view_dependent_features<T: Real>(lifted: &Tensor<T>, g0: &GaussianTensors<T>) -> Tensor<T> {
    Tensor::concat_cols(&[
        lifted,
        &g0.sh,
        &g0.opacity_logit.sigmoid(),
        &g0.rotation.normalize_rows(),
        &g0.log_scale.exp(),
    ])
}

/// Residual updates from the fusion decoder.
#[derive(Debug, Clone)]
pub struct FusionResiduals<T: Real> {
    /// `[G, 3B]`, same layout as the SH tensor.
    pub color: Tensor<T>,
    pub opacity_logit: Tensor<T>,
    pub rotation: Tensor<T>,
    pub log_scale: Tensor<T>,
    /// Mean-pooled instance descriptor, `[instance_feature_dim]`.
    pub instance_feature: Tensor<T>,
}

/// Shared trunk with a zero-initialised residual head and an instance
/// feature head.
#[derive(Debug, Clone)]
pub struct FusionDecoder<T: Real> {
    pub sh_degree: usize,
    /// `D_vd -> 128 -> 64 -> residuals`.
    pub mlp: Mlp<T>,
    pub instance_head: Linear<T>,
}

impl<T: Real> FusionDecoder<T> {
    pub fn new(sh_degree: usize, instance_feature_dim: usize, rng: &mut impl Rng) -> Self {
        let mlp = Mlp::new(
            &[view_feature_dim(sh_degree), 128, 64, residual_dim(sh_degree)],
            Init::Zeros,
            rng,
        );
        FusionDecoder {
            sh_degree,
            mlp,
            instance_head: Linear::new(64, instance_feature_dim, Init::GlorotUniform, rng),
        }
    }

    pub fn decode(&self, fused: &Tensor<T>) -> FusionResiduals<T> {
        let hidden = self.mlp.trunk(fused);
        let out = self.mlp.layers.last().expect("decoder has layers").forward(&hidden);
        let nc = 3 * num_bases(self.sh_degree);
        FusionResiduals {
            color: out.slice_cols(0, nc),
            opacity_logit: out.slice_cols(nc, nc + 1),
            rotation: out.slice_cols(nc + 1, nc + 5),
            log_scale: out.slice_cols(nc + 5, nc + 8),
            instance_feature: self.instance_head.forward(&hidden).mean_rows(),
        }
    }
}

impl<T: Real> Module<T> for FusionDecoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
        self.instance_head.collect_params(&format!("{prefix}.instance_head"), out);
    }
}

/// Applies stage-one residuals. Centers and the stretch are shared with the
/// input; the rotation is renormalised after the additive update.
pub fn apply_fusion<T: Real>(g0: &GaussianTensors<T>, r: &FusionResiduals<T>) -> GaussianTensors<T> {
    GaussianTensors {
        sh_degree: g0.sh_degree,
        centers: g0.centers.clone(),
        sh: g0.sh.add(&r.color),
        opacity_logit: g0.opacity_logit.add(&r.opacity_logit),
        rotation: g0.rotation.add(&r.rotation).normalize_rows(),
        log_scale: g0.log_scale.add(&r.log_scale),
        stretch: g0.stretch.clone(),
    }
}
