//! Tile-based alpha compositing of projected Gaussians, its gradient, and a
//! brute-force reference renderer.
//!
//! A pixel's colour is `sum_k c_k s_k prod_{l<k} (1 - s_l) + T bg` where
//! `s_k = alpha_k exp(-d^T conic d / 2)` is clamped to `max_alpha` and `T` is
//! the transmittance left after the last composited Gaussian.

mod composite;
mod image_io;
mod preprocess;
mod tiles;

use mmgs_diffgrad::{Real, Tensor};

use crate::error::GaussianError;
use crate::gaussians::{self, Camera, GaussianSet};
use crate::linalg::Mat3;
use crate::parallel::Parallelism;

pub use image_io::{read_float_image, read_png_rgb, write_float_image, write_png_rgb, FLOAT_IMAGE_MAGIC};
pub use preprocess::PreprocessCounts;
pub use tiles::TileGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterOptions {
    pub tile_size: u32,
    /// Bin each Gaussian only into tiles touched by its `cull_sigmas` box.
    pub cull: bool,
    pub cull_sigmas: f64,
    pub early_termination: bool,
    pub min_transmittance: f64,
    pub max_alpha: f64,
    pub parallelism: Parallelism,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions {
            tile_size: 16,
            cull: true,
            cull_sigmas: 3.0,
            early_termination: true,
            min_transmittance: 1e-4,
            max_alpha: 0.99,
            parallelism: Parallelism::sequential(),
        }
    }
}

impl RasterOptions {
    /// Every Gaussian in every tile and no early stop: the tiled sum then
    /// matches the reference renderer term for term.
    pub fn exhaustive() -> Self {
        RasterOptions {
            cull: false,
            early_termination: false,
            ..Default::default()
        }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.parallelism = Parallelism::new(threads);
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub counts: PreprocessCounts,
    pub tile_entries: usize,
}

/// An `H x W` image with its accumulated opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage<T> {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB, `H * W * 3`.
    pub pixels: Vec<T>,
    /// `1 - T` per pixel.
    pub alpha: Vec<T>,
    pub stats: RenderStats,
}

impl<T: Real> RenderedImage<T> {
    pub fn pixel(&self, x: u32, y: u32) -> [T; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

fn check_set<T: Real>(set: &GaussianSet<T>) -> Result<(), GaussianError> {
    let g = set.len();
    if set.sh_degree > gaussians::MAX_SH_DEGREE {
        return Err(GaussianError::ShDegree { degree: set.sh_degree });
    }
    let lens = [
        ("sh", set.sh.len(), g * set.bases() * 3),
        ("opacity_logit", set.opacity_logit.len(), g),
        ("rotation", set.rotation.len(), g),
        ("log_scale", set.log_scale.len(), g),
        ("stretch", set.stretch.as_ref().map_or(g, Vec::len), g),
    ];
    for (name, got, want) in lens {
        if got != want {
            return Err(GaussianError::Shape(format!("{name} has {got} entries, expected {want}")));
        }
    }
    if set.rotation.iter().any(|&q| crate::linalg::quat_norm(q) == T::zero()) {
        return Err(GaussianError::ZeroQuaternion);
    }
    Ok(())
}

struct Forward<T> {
    splats: Vec<Option<preprocess::Splat<T>>>,
    grid: TileGrid,
    tiles: Vec<composite::TileForward<T>>,
    image: RenderedImage<T>,
}

fn forward<T: Real>(set: &GaussianSet<T>, cam: &Camera, background: [T; 3], opts: &RasterOptions) -> Result<Forward<T>, GaussianError> {
    check_set(set)?;
    cam.validate()?;
    let (splats, counts) = preprocess::project_all(set, cam);
    let (w, h) = (cam.width, cam.height);
    let grid = tiles::bin(&splats, w, h, opts.tile_size.max(1), opts.cull.then_some(opts.cull_sigmas));
    let tiles = opts.parallelism.map(grid.tile_count(), |t| {
        composite::forward(&grid.lists[t], &splats, grid.pixel_bounds(t, w, h), background, opts)
    });
    let mut pixels = vec![T::zero(); (w * h * 3) as usize];
    let mut alpha = vec![T::zero(); (w * h) as usize];
    for (t, tf) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = grid.pixel_bounds(t, w, h);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = (y * w + x) as usize;
                pixels[p * 3..p * 3 + 3].copy_from_slice(&tf.color[k]);
                alpha[p] = T::one() - tf.transmittance[k];
                k += 1;
            }
        }
    }
    let stats = RenderStats {
        counts,
        tile_entries: grid.entries(),
    };
    if counts.degenerate > 0 {
        log::debug!("skipped {} Gaussians with a singular screen covariance", counts.degenerate);
    }
    Ok(Forward {
        splats,
        grid,
        tiles,
        image: RenderedImage {
            width: w,
            height: h,
            pixels,
            alpha,
            stats,
        },
    })
}

/// Renders a Gaussian set with the tiled compositor.
pub fn rasterize<T: Real>(
    set: &GaussianSet<T>,
    cam: &Camera,
    background: [T; 3],
    opts: &RasterOptions,
) -> Result<RenderedImage<T>, GaussianError> {
    Ok(forward(set, cam, background, opts)?.image)
}

/// The tile lists a render would use, for inspection.
pub fn tile_grid<T: Real>(set: &GaussianSet<T>, cam: &Camera, opts: &RasterOptions) -> Result<TileGrid, GaussianError> {
    check_set(set)?;
    let (splats, _) = preprocess::project_all(set, cam);
    Ok(tiles::bin(&splats, cam.width, cam.height, opts.tile_size.max(1), opts.cull.then_some(opts.cull_sigmas)))
}

/// Oracle renderer: one global depth order, every Gaussian evaluated at
/// every pixel, no early termination. Built directly on the primitives in
/// [`gaussians`] rather than the tiled pipeline.
pub fn rasterize_reference<T: Real>(
    set: &GaussianSet<T>,
    cam: &Camera,
    background: [T; 3],
) -> Result<RenderedImage<T>, GaussianError> {
    check_set(set)?;
    cam.validate()?;
    let mut counts = PreprocessCounts::default();
    let center = cam.center();
    let mut items = Vec::new();
    for i in 0..set.len() {
        let sigma = set.covariance(i)?;
        let Some(p) = gaussians::project_gaussian(set.centers[i], &sigma, cam) else {
            counts.culled_near += 1;
            continue;
        };
        let [[a, b], [_, c]] = p.cov;
        let det = a * c - b * b;
        if !(det > T::zero()) {
            counts.degenerate += 1;
            continue;
        }
        let inv = [[c / det, -b / det], [-b / det, a / det]];
        let v = [0, 1, 2].map(|k| set.centers[i][k] - T::of(center[k]));
        let dir = crate::linalg::normalize(v);
        let color = gaussians::evaluate_sh_color(set.coeffs(i), set.sh_degree, dir)?;
        counts.visible += 1;
        items.push((p.depth, i, p.mean, inv, gaussians::sigmoid(set.opacity_logit[i]), color));
    }
    items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let (w, h) = (cam.width, cam.height);
    let mut pixels = Vec::with_capacity((w * h * 3) as usize);
    let mut alpha = Vec::with_capacity((w * h) as usize);
    let cap = T::of(0.99);
    let half = T::of(0.5);
    for y in 0..h {
        for x in 0..w {
            let mut t = T::one();
            let mut c = [T::zero(); 3];
            for (_, _, mean, inv, opacity, color) in &items {
                let d = [T::of(x as f64) - mean[0], T::of(y as f64) - mean[1]];
                let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
                let s = (*opacity * (-half * q).exp()).min(cap);
                for ch in 0..3 {
                    c[ch] += color[ch] * s * t;
                }
                t *= T::one() - s;
            }
            for ch in 0..3 {
                pixels.push(c[ch] + t * background[ch]);
            }
            alpha.push(T::one() - t);
        }
    }
    Ok(RenderedImage {
        width: w,
        height: h,
        pixels,
        alpha,
        stats: RenderStats {
            counts,
            tile_entries: 0,
        },
    })
}

/// Gaussian attributes as tensors, in the layout the renderer expects:
/// centers `[G, 3]`, sh `[G, B*3]`, opacity logits `[G, 1]`, quaternions
/// `[G, 4]`, log scales `[G, 3]`. `stretch` is a constant per-Gaussian
/// linear map (see [`GaussianSet`]).
#[derive(Debug, Clone)]
pub struct GaussianTensors<T: Real> {
    pub sh_degree: usize,
    pub centers: Tensor<T>,
    pub sh: Tensor<T>,
    pub opacity_logit: Tensor<T>,
    pub rotation: Tensor<T>,
    pub log_scale: Tensor<T>,
    pub stretch: Option<Vec<Mat3<T>>>,
}

fn rows3<T: Copy>(v: &[T]) -> Vec<[T; 3]> {
    v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

impl<T: Real> GaussianTensors<T> {
    /// Wraps a set; every attribute becomes a parameter when
    /// `requires_grad` is set, otherwise a constant.
    pub fn from_set(set: &GaussianSet<T>, requires_grad: bool) -> Self {
        let g = set.len();
        let make = |shape: &[usize], data: Vec<T>| {
            if requires_grad {
                Tensor::param(shape, data)
            } else {
                Tensor::new(shape, data)
            }
        };
        GaussianTensors {
            sh_degree: set.sh_degree,
            centers: make(&[g, 3], set.centers.iter().flatten().copied().collect()),
            sh: make(&[g, set.bases() * 3], set.sh.clone()),
            opacity_logit: make(&[g, 1], set.opacity_logit.clone()),
            rotation: make(&[g, 4], set.rotation.iter().flatten().copied().collect()),
            log_scale: make(&[g, 3], set.log_scale.iter().flatten().copied().collect()),
            stretch: set.stretch.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current values as a plain set.
    pub fn to_set(&self) -> GaussianSet<T> {
        GaussianSet {
            sh_degree: self.sh_degree,
            centers: rows3(&self.centers.data()),
            sh: self.sh.to_vec(),
            opacity_logit: self.opacity_logit.to_vec(),
            rotation: self.rotation.data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            log_scale: rows3(&self.log_scale.data()),
            stretch: self.stretch.clone(),
        }
    }

    /// Row-wise concatenation; stretch defaults to the identity for parts
    /// that have none.
    pub fn concat(parts: &[&GaussianTensors<T>]) -> Self {
        let degree = parts.first().map_or(1, |p| p.sh_degree);
        let cat = |f: &dyn Fn(&GaussianTensors<T>) -> &Tensor<T>| {
            Tensor::concat_rows(&parts.iter().map(|p| f(p)).collect::<Vec<_>>())
        };
        let stretch = parts.iter().any(|p| p.stretch.is_some()).then(|| {
            parts
                .iter()
                .flat_map(|p| match &p.stretch {
                    Some(s) => s.clone(),
                    None => vec![crate::linalg::identity(); p.len()],
                })
                .collect()
        });
        GaussianTensors {
            sh_degree: degree,
            centers: cat(&|p| &p.centers),
            sh: cat(&|p| &p.sh),
            opacity_logit: cat(&|p| &p.opacity_logit),
            rotation: cat(&|p| &p.rotation),
            log_scale: cat(&|p| &p.log_scale),
            stretch,
        }
    }
}

/// A differentiable render.
pub struct Rendered<T: Real> {
    /// `[H, W, 3]`.
    pub image: Tensor<T>,
    pub alpha: Vec<T>,
    pub stats: RenderStats,
}

/// Renders tensors with the tiled compositor and records the operation so
/// that gradients reach every attribute tensor. Per-tile gradient buffers are
/// merged in tile order, so the result does not depend on the worker count.
pub fn render<T: Real>(
    g: &GaussianTensors<T>,
    cam: &Camera,
    background: [T; 3],
    opts: &RasterOptions,
) -> Result<Rendered<T>, GaussianError> {
    let set = g.to_set();
    let fwd = forward(&set, cam, background, opts)?;
    let (w, h) = (cam.width, cam.height);
    let image = fwd.image;
    let cam = cam.clone();
    let opts = *opts;
    let Forward { splats, grid, tiles, .. } = fwd;
    let backward = move |d_image: &[T]| {
        let per_tile = opts.parallelism.map(grid.tile_count(), |t| {
            composite::backward(
                &grid.lists[t],
                &splats,
                grid.pixel_bounds(t, w, h),
                w,
                background,
                &opts,
                &tiles[t],
                d_image,
            )
        });
        let mut grads = vec![preprocess::SplatGrad::zero(); set.len()];
        for (t, local) in per_tile.iter().enumerate() {
            for (&i, gr) in grid.lists[t].iter().zip(local) {
                grads[i as usize].accumulate(gr);
            }
        }
        let a = preprocess::backward_all(&set, &cam, &splats, &grads);
        vec![
            Some(a.centers),
            Some(a.sh),
            Some(a.opacity_logit),
            Some(a.rotation),
            Some(a.log_scale),
        ]
    };
    let tensor = Tensor::from_op(
        "render",
        vec![h as usize, w as usize, 3],
        image.pixels,
        vec![
            g.centers.clone(),
            g.sh.clone(),
            g.opacity_logit.clone(),
            g.rotation.clone(),
            g.log_scale.clone(),
        ],
        Box::new(backward),
    );
    Ok(Rendered {
        image: tensor,
        alpha: image.alpha,
        stats: image.stats,
    })
}
