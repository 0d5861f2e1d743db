//! Per-Gaussian projection to screen space and its adjoint.

use mmgs_diffgrad::Real;

use crate::gaussians::{self, Camera, GaussianSet, COV2D_FLOOR, ZNEAR};
use crate::linalg::{self, Mat3, Vec3};

/// A Gaussian ready for compositing.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat<T> {
    pub index: usize,
    pub mean: [T; 2],
    /// Upper triangle `(a, b, c)` of the inverse screen covariance.
    pub conic: [T; 3],
    pub opacity: T,
    pub color: [T; 3],
    pub depth: T,
    /// Screen-space standard deviations along x and y.
    pub std_dev: [T; 2],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PreprocessCounts {
    pub visible: usize,
    pub culled_near: usize,
    pub degenerate: usize,
}

/// Gradient of the loss with respect to one splat's screen-space values.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatGrad<T> {
    pub mean: [T; 2],
    pub conic: [T; 3],
    pub opacity: T,
    pub color: [T; 3],
}

impl<T: Real> SplatGrad<T> {
    pub fn zero() -> Self {
        let z = T::zero();
        SplatGrad {
            mean: [z; 2],
            conic: [z; 3],
            opacity: z,
            color: [z; 3],
        }
    }

    pub fn accumulate(&mut self, o: &SplatGrad<T>) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Gradients with respect to the stored attributes of a Gaussian set.
pub(crate) struct AttributeGrads<T> {
    pub centers: Vec<T>,
    pub sh: Vec<T>,
    pub opacity_logit: Vec<T>,
    pub rotation: Vec<T>,
    pub log_scale: Vec<T>,
}

struct Geometry<T> {
    t: Vec3<T>,
    m: Mat3<T>,
    jac: [[T; 3]; 2],
    cov: [T; 3],
    det: T,
}

fn geometry<T: Real>(set: &GaussianSet<T>, i: usize, cam: &Camera, sigma: &Mat3<T>) -> Option<Geometry<T>> {
    let t = cam.world_to_camera(set.centers[i]);
    if t[2] <= T::of(ZNEAR) {
        return None;
    }
    let w = linalg::cast_mat::<T>(&cam.rotation);
    let m = linalg::conjugate(&w, sigma);
    let jac = gaussians::projection_jacobian(cam, t);
    let mut cov = [T::zero(); 3];
    for (k, (p, q)) in [(0, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let mut s = T::zero();
        for a in 0..3 {
            for b in 0..3 {
                s += jac[p][a] * m[a][b] * jac[q][b];
            }
        }
        cov[k] = s;
    }
    cov[0] += T::of(COV2D_FLOOR);
    cov[2] += T::of(COV2D_FLOOR);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    Some(Geometry { t, m, jac, cov, det })
}

fn view_direction<T: Real>(mu: Vec3<T>, cam: &Camera) -> (Vec3<T>, T) {
    let v = linalg::sub(mu, linalg::cast_vec(&cam.center()));
    let n = linalg::norm(v);
    (linalg::scale(v, T::one() / n), n)
}

/// Projects every Gaussian. Entries are `None` when culled by the near plane
/// or when the screen covariance is not invertible.
pub(crate) fn project_all<T: Real>(set: &GaussianSet<T>, cam: &Camera) -> (Vec<Option<Splat<T>>>, PreprocessCounts) {
    let mut counts = PreprocessCounts::default();
    let splats = (0..set.len())
        .map(|i| {
            let sigma = match set.covariance(i) {
                Ok(s) => s,
                Err(_) => {
                    counts.degenerate += 1;
                    return None;
                }
            };
            let Some(g) = geometry(set, i, cam, &sigma) else {
                counts.culled_near += 1;
                return None;
            };
            if !(g.det > T::zero()) || !g.det.is_finite() {
                counts.degenerate += 1;
                return None;
            }
            let [x, y, z] = g.t;
            let mean = [
                (T::of(cam.fx()) * x + T::of(cam.skew()) * y) / z + T::of(cam.cx()),
                T::of(cam.fy()) * y / z + T::of(cam.cy()),
            ];
            let inv = T::one() / g.det;
            let conic = [g.cov[2] * inv, -g.cov[1] * inv, g.cov[0] * inv];
            let (dir, _) = view_direction(set.centers[i], cam);
            let raw = gaussians::sh_color_unclamped(set.coeffs(i), set.sh_degree, dir);
            counts.visible += 1;
            Some(Splat {
                index: i,
                mean,
                conic,
                opacity: gaussians::sigmoid(set.opacity_logit[i]),
                color: raw.map(|v| v.max(T::zero()).min(T::one())),
                depth: z,
                std_dev: [g.cov[0].sqrt(), g.cov[2].sqrt()],
            })
        })
        .collect();
    (splats, counts)
}

/// Chains screen-space gradients back to the stored attributes.
pub(crate) fn backward_all<T: Real>(
    set: &GaussianSet<T>,
    cam: &Camera,
    splats: &[Option<Splat<T>>],
    grads: &[SplatGrad<T>],
) -> AttributeGrads<T> {
    let n = set.len();
    let nb = set.bases();
    let mut out = AttributeGrads {
        centers: vec![T::zero(); n * 3],
        sh: vec![T::zero(); n * nb * 3],
        opacity_logit: vec![T::zero(); n],
        rotation: vec![T::zero(); n * 4],
        log_scale: vec![T::zero(); n * 3],
    };
    let two = T::of(2.0);
    for i in 0..n {
        let Some(sp) = &splats[i] else { continue };
        let g = &grads[i];
        let mut d_mu = [T::zero(); 3];

        // colour
        let (dir, vnorm) = view_direction(set.centers[i], cam);
        let mut basis_grad = Vec::new();
        let basis = gaussians::sh_basis(set.sh_degree, dir, Some(&mut basis_grad));
        let coeffs = set.coeffs(i);
        let raw = gaussians::sh_color_unclamped(coeffs, set.sh_degree, dir);
        let mut d_raw = [T::zero(); 3];
        for ch in 0..3 {
            if raw[ch] > T::zero() && raw[ch] < T::one() {
                d_raw[ch] = g.color[ch];
            }
        }
        let mut d_dir = [T::zero(); 3];
        for b in 0..nb {
            let mut w = T::zero();
            for ch in 0..3 {
                out.sh[(i * nb + b) * 3 + ch] = basis[b] * d_raw[ch];
                w += coeffs[b * 3 + ch] * d_raw[ch];
            }
            for k in 0..3 {
                d_dir[k] += w * basis_grad[b][k];
            }
        }
        let proj = linalg::dot(dir, d_dir);
        for k in 0..3 {
            d_mu[k] += (d_dir[k] - dir[k] * proj) / vnorm;
        }

        // opacity
        out.opacity_logit[i] = g.opacity * sp.opacity * (T::one() - sp.opacity);

        // screen geometry
        let rot = linalg::quat_to_mat(set.rotation[i]);
        let s = set.scale(i);
        let s2 = [s[0] * s[0], s[1] * s[1], s[2] * s[2]];
        let sigma_b = linalg::conjugate(&rot, &linalg::diag(s2));
        let sigma = match &set.stretch {
            Some(v) => linalg::conjugate(&v[i], &sigma_b),
            None => sigma_b,
        };
        let geo = geometry(set, i, cam, &sigma).expect("visible splat has valid geometry");
        let [ca, cb, cc] = geo.cov;
        let d2 = geo.det * geo.det;
        let [ga, gb, gc] = g.conic;
        // conic (a, b, c) = (C, -B, A) / det
        let d_cov_a = ga * (-cc * cc / d2) + gb * (cb * cc / d2) + gc * (-cb * cb / d2);
        let d_cov_b = ga * (two * cb * cc / d2)
            + gb * (-T::one() / geo.det - two * cb * cb / d2)
            + gc * (two * ca * cb / d2);
        let d_cov_c = ga * (-cb * cb / d2) + gb * (ca * cb / d2) + gc * (-ca * ca / d2);
        // symmetric 2x2 gradient; the off-diagonal entry appears twice
        let gm = [[d_cov_a, d_cov_b / two], [d_cov_b / two, d_cov_c]];
        let j = geo.jac;
        let m = geo.m;
        // dM = J^T G J, dJ = 2 G J M
        let mut dm = [[T::zero(); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let mut v = T::zero();
                for p in 0..2 {
                    for q in 0..2 {
                        v += j[p][a] * gm[p][q] * j[q][b];
                    }
                }
                dm[a][b] = v;
            }
        }
        let mut jm = [[T::zero(); 3]; 2];
        for p in 0..2 {
            for b in 0..3 {
                jm[p][b] = (0..3).map(|a| j[p][a] * m[a][b]).sum();
            }
        }
        let mut dj = [[T::zero(); 3]; 2];
        for p in 0..2 {
            for b in 0..3 {
                dj[p][b] = two * (gm[p][0] * jm[0][b] + gm[p][1] * jm[1][b]);
            }
        }

        let [x, y, z] = geo.t;
        let fx = T::of(cam.fx());
        let fy = T::of(cam.fy());
        let sk = T::of(cam.skew());
        let iz = T::one() / z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut dt = [T::zero(); 3];
        // mean
        dt[0] += g.mean[0] * fx * iz;
        dt[1] += g.mean[0] * sk * iz + g.mean[1] * fy * iz;
        dt[2] += -g.mean[0] * (fx * x + sk * y) * iz2 - g.mean[1] * fy * y * iz2;
        // Jacobian entries
        dt[0] += dj[0][2] * (-fx * iz2);
        dt[1] += dj[0][2] * (-sk * iz2) + dj[1][2] * (-fy * iz2);
        dt[2] += dj[0][0] * (-fx * iz2)
            + dj[0][1] * (-sk * iz2)
            + dj[0][2] * (two * (fx * x + sk * y) * iz3)
            + dj[1][1] * (-fy * iz2)
            + dj[1][2] * (two * fy * y * iz3);
        let w = linalg::cast_mat::<T>(&cam.rotation);
        let dmu_t = linalg::mat_t_vec(&w, dt);
        for k in 0..3 {
            d_mu[k] += dmu_t[k];
            out.centers[i * 3 + k] = d_mu[k];
        }

        // covariance: M = W Sigma W^T, Sigma = V Sigma_b V^T
        let wt = linalg::transpose(&w);
        let mut d_sigma = linalg::conjugate(&wt, &dm);
        if let Some(v) = &set.stretch {
            d_sigma = linalg::conjugate(&linalg::transpose(&v[i]), &d_sigma);
        }
        // Sigma_b = R D R^T
        let dr = linalg::mat_scale(&linalg::mat_mul(&linalg::mat_mul(&d_sigma, &rot), &linalg::diag(s2)), two);
        let rt_d_r = linalg::conjugate(&linalg::transpose(&rot), &d_sigma);
        for k in 0..3 {
            out.log_scale[i * 3 + k] = rt_d_r[k][k] * two * s2[k];
        }
        let q = set.rotation[i];
        let qn = linalg::quat_norm(q);
        let unit = q.map(|v| v / qn);
        let dn = linalg::quat_to_mat_backward(unit, &dr);
        let dot: T = (0..4).map(|k| unit[k] * dn[k]).sum();
        for k in 0..4 {
            out.rotation[i * 4 + k] = (dn[k] - unit[k] * dot) / qn;
        }
    }
    out
}
