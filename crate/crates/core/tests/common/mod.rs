#![allow(dead_code)]

use mmgs_core::gaussians::{num_bases, Camera, GaussianSet};
use mmgs_core::linalg;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera at the origin looking down +z.
pub fn axis_camera(width: u32, height: u32, focal: f64) -> Camera {
    Camera::new(
        0,
        [
            [focal, 0.0, (width as f64 - 1.0) / 2.0],
            [0.0, focal, (height as f64 - 1.0) / 2.0],
            [0.0, 0.0, 1.0],
        ],
        linalg::identity(),
        [0.0; 3],
        width,
        height,
    )
    .unwrap()
}

pub fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = linalg::quat_norm(q);
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Gaussians scattered in the frustum of [`axis_camera`].
pub fn random_scene(rng: &mut impl Rng, count: usize, sh_degree: usize, scale: (f64, f64)) -> GaussianSet<f64> {
    let nb = num_bases(sh_degree);
    let mut set = GaussianSet::empty(sh_degree);
    for _ in 0..count {
        let z = rng.gen_range(1.5..4.0);
        set.centers
            .push([rng.gen_range(-0.45..0.45) * z, rng.gen_range(-0.45..0.45) * z, z]);
        for b in 0..nb {
            for _ in 0..3 {
                let amp = if b == 0 { 1.2 } else { 0.3 };
                set.sh.push(rng.gen_range(-amp..amp));
            }
        }
        set.opacity_logit.push(rng.gen_range(-2.0..3.0));
        set.rotation.push(random_unit_quat(rng));
        set.log_scale
            .push(std::array::from_fn(|_| rng.gen_range(scale.0.ln()..scale.1.ln())));
    }
    set
}

pub fn max_abs_diff<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.into() - y.into()).abs())
        .fold(0.0, f64::max)
}

/// Direct SSIM: full 2-D window sums at every valid position, numpy-style
/// reflect padding for short axes.
pub fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let pad = |n: usize| -> Vec<usize> {
        if n >= 11 {
            return (0..n).collect();
        }
        let before = (11 - n) / 2;
        let mut idx: Vec<i64> = (0..11).map(|i| i as i64 - before as i64).collect();
        for v in idx.iter_mut() {
            while *v < 0 || *v >= n as i64 {
                if *v < 0 {
                    *v = -*v;
                }
                if *v >= n as i64 {
                    *v = 2 * (n as i64 - 1) - *v;
                }
            }
        }
        idx.into_iter().map(|v| v as usize).collect()
    };
    let (ry, rx) = (pad(h), pad(w));
    let (ph, pw) = (ry.len(), rx.len());
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let mut total = 0.0;
    let mut count = 0.0;
    for c in 0..3 {
        for y0 in 0..=ph - 11 {
            for x0 in 0..=pw - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = g[dy] * g[dx] / (gs * gs);
                        let p = (ry[y0 + dy] * w + rx[x0 + dx]) * 3 + c;
                        mx += wgt * a[p];
                        my += wgt * b[p];
                        xx += wgt * a[p] * a[p];
                        yy += wgt * b[p] * b[p];
                        xy += wgt * a[p] * b[p];
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                let c1 = 1e-4;
                let c2 = 9e-4;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

pub fn psnr_direct(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}
