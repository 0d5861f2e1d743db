//! The 3D Gaussian primitive: attribute storage, covariance, view-dependent
//! color and perspective projection.

use mmgs_diffgrad::Real;
use serde::{Deserialize, Serialize};

use crate::error::GaussianError;
use crate::linalg::{self, Mat3, Quat, Vec3};

/// Camera-space depth below which a Gaussian is culled.
pub const ZNEAR: f64 = 0.01;
/// Screen-space low-pass floor added to projected covariance diagonals (px^2).
pub const COV2D_FLOOR: f64 = 0.3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of SH basis functions for `degree`.
pub fn num_bases(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Pinhole camera with a world-to-camera rigid transform. Pixel centres sit
/// at integer coordinates; the camera looks down +z with +y pointing down
/// the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: u32,
    pub intrinsics: Mat3<f64>,
    pub rotation: Mat3<f64>,
    pub translation: Vec3<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        id: u32,
        intrinsics: Mat3<f64>,
        rotation: Mat3<f64>,
        translation: Vec3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GaussianError> {
        let cam = Camera {
            id,
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GaussianError> {
        if !linalg::is_rotation(&self.rotation, 1e-6) {
            return Err(GaussianError::InvalidCamera(format!(
                "camera {}: rotation is not orthonormal with det +1",
                self.id
            )));
        }
        if !(self.intrinsics[0][0] > 0.0 && self.intrinsics[1][1] > 0.0) {
            return Err(GaussianError::InvalidCamera(format!(
                "camera {}: focal lengths must be positive",
                self.id
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GaussianError::InvalidCamera(format!(
                "camera {}: empty image size",
                self.id
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        id: u32,
        eye: Vec3<f64>,
        target: Vec3<f64>,
        up: Vec3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = linalg::normalize(linalg::sub(target, eye));
        let right = linalg::normalize(linalg::cross(forward, up));
        let down = linalg::cross(forward, right);
        let rotation = [right, down, forward];
        let translation = linalg::scale(linalg::mat_vec(&rotation, eye), -1.0);
        let intrinsics = [
            [focal, 0.0, (width as f64 - 1.0) / 2.0],
            [0.0, focal, (height as f64 - 1.0) / 2.0],
            [0.0, 0.0, 1.0],
        ];
        Camera {
            id,
            intrinsics,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }
    pub fn skew(&self) -> f64 {
        self.intrinsics[0][1]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    /// World-space camera centre `-R^T t`.
    pub fn center(&self) -> Vec3<f64> {
        linalg::scale(linalg::mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    pub fn world_to_camera<T: Real>(&self, p: Vec3<T>) -> Vec3<T> {
        let r = linalg::cast_mat::<T>(&self.rotation);
        linalg::add(linalg::mat_vec(&r, p), linalg::cast_vec(&self.translation))
    }

    /// Pixel coordinates and depth of a world point, or `None` when it lies
    /// at or behind the near plane.
    pub fn project_point<T: Real>(&self, p: Vec3<T>) -> Option<([T; 2], T)> {
        let t = self.world_to_camera(p);
        if t[2] <= T::of(ZNEAR) {
            return None;
        }
        let u = (T::of(self.fx()) * t[0] + T::of(self.skew()) * t[1]) / t[2] + T::of(self.cx());
        let v = T::of(self.fy()) * t[1] / t[2] + T::of(self.cy());
        Some(([u, v], t[2]))
    }
}

/// Attributes of `G` Gaussians.
///
/// Opacity is stored as a logit and scale as a log so the activations keep
/// them in range. `stretch`, when present, is a per-Gaussian linear map
/// applied on the left of the rotation: the covariance becomes
/// `V R S^2 R^T V^T`, which lets blended (non-orthonormal) skinning
/// transforms be represented exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet<T: Real> {
    pub sh_degree: usize,
    pub centers: Vec<Vec3<T>>,
    /// `G * bases * 3`, laid out `[gaussian][basis][channel]`.
    pub sh: Vec<T>,
    pub opacity_logit: Vec<T>,
    pub rotation: Vec<Quat<T>>,
    pub log_scale: Vec<Vec3<T>>,
    pub stretch: Option<Vec<Mat3<T>>>,
}

impl<T: Real> GaussianSet<T> {
    pub fn empty(sh_degree: usize) -> Self {
        GaussianSet {
            sh_degree,
            centers: Vec::new(),
            sh: Vec::new(),
            opacity_logit: Vec::new(),
            rotation: Vec::new(),
            log_scale: Vec::new(),
            stretch: None,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn bases(&self) -> usize {
        num_bases(self.sh_degree)
    }

    pub fn coeffs(&self, i: usize) -> &[T] {
        let n = self.bases() * 3;
        &self.sh[i * n..(i + 1) * n]
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logit[i])
    }

    pub fn scale(&self, i: usize) -> Vec3<T> {
        self.log_scale[i].map(|v| v.exp())
    }

    pub fn covariance(&self, i: usize) -> Result<Mat3<T>, GaussianError> {
        let base = covariance_from_rotation_scale(self.rotation[i], self.scale(i))?;
        Ok(match &self.stretch {
            Some(v) => linalg::conjugate(&v[i], &base),
            None => base,
        })
    }

    /// Checks array lengths and quaternion norms.
    pub fn validate(&self) -> Result<(), GaussianError> {
        let g = self.len();
        let bad = |what: &str, n: usize| {
            Err(GaussianError::Shape(format!("{what} has {n} entries for {g} Gaussians")))
        };
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(GaussianError::ShDegree {
                degree: self.sh_degree,
            });
        }
        if self.sh.len() != g * self.bases() * 3 {
            return bad("sh", self.sh.len());
        }
        if self.opacity_logit.len() != g {
            return bad("opacity_logit", self.opacity_logit.len());
        }
        if self.rotation.len() != g {
            return bad("rotation", self.rotation.len());
        }
        if self.log_scale.len() != g {
            return bad("log_scale", self.log_scale.len());
        }
        if let Some(s) = &self.stretch {
            if s.len() != g {
                return bad("stretch", s.len());
            }
        }
        for (i, q) in self.rotation.iter().enumerate() {
            if (linalg::quat_norm(*q).as_f64() - 1.0).abs() > 1e-6 {
                return Err(GaussianError::Shape(format!("rotation {i} is not a unit quaternion")));
            }
        }
        Ok(())
    }

    /// Concatenates sets that share an SH degree. Stretch maps default to the
    /// identity for sets that have none.
    pub fn concat(parts: &[&GaussianSet<T>]) -> GaussianSet<T> {
        let degree = parts.first().map(|p| p.sh_degree).unwrap_or(1);
        let mut out = GaussianSet::empty(degree);
        let any_stretch = parts.iter().any(|p| p.stretch.is_some());
        let mut stretch = Vec::new();
        for p in parts {
            assert_eq!(p.sh_degree, degree, "concatenating mixed SH degrees");
            out.centers.extend_from_slice(&p.centers);
            out.sh.extend_from_slice(&p.sh);
            out.opacity_logit.extend_from_slice(&p.opacity_logit);
            out.rotation.extend_from_slice(&p.rotation);
            out.log_scale.extend_from_slice(&p.log_scale);
            if any_stretch {
                match &p.stretch {
                    Some(s) => stretch.extend_from_slice(s),
                    None => stretch.extend(std::iter::repeat(linalg::identity()).take(p.len())),
                }
            }
        }
        if any_stretch {
            out.stretch = Some(stretch);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> GaussianSet<U> {
        let c = |v: T| U::of(v.as_f64());
        GaussianSet {
            sh_degree: self.sh_degree,
            centers: self.centers.iter().map(|p| p.map(c)).collect(),
            sh: self.sh.iter().map(|&v| c(v)).collect(),
            opacity_logit: self.opacity_logit.iter().map(|&v| c(v)).collect(),
            rotation: self.rotation.iter().map(|q| q.map(c)).collect(),
            log_scale: self.log_scale.iter().map(|s| s.map(c)).collect(),
            stretch: self
                .stretch
                .as_ref()
                .map(|v| v.iter().map(|m| m.map(|r| r.map(c))).collect()),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// `R(r) diag(s)^2 R(r)^T`, normalising the quaternion first.
pub fn covariance_from_rotation_scale<T: Real>(r: Quat<T>, s: Vec3<T>) -> Result<Mat3<T>, GaussianError> {
    let n = linalg::quat_norm(r);
    if n == T::zero() || !n.is_finite() {
        return Err(GaussianError::ZeroQuaternion);
    }
    let rot = linalg::quat_to_mat(r);
    Ok(linalg::conjugate(&rot, &linalg::diag([s[0] * s[0], s[1] * s[1], s[2] * s[2]])))
}

/// Real SH basis values for `degree` at unit direction `d`, and optionally
/// their gradients with respect to `d`.
pub fn sh_basis<T: Real>(degree: usize, d: Vec3<T>, grads: Option<&mut Vec<Vec3<T>>>) -> Vec<T> {
    let n = num_bases(degree);
    let [x, y, z] = d;
    let k = |v: f64| T::of(v);
    let o = T::zero();
    let mut b = Vec::with_capacity(n);
    let mut g: Vec<Vec3<T>> = Vec::with_capacity(n);
    b.push(k(SH_C0));
    g.push([o, o, o]);
    if degree >= 1 {
        let c1 = k(SH_C1);
        b.extend([-c1 * y, c1 * z, -c1 * x]);
        g.extend([[o, -c1, o], [o, o, c1], [-c1, o, o]]);
    }
    if degree >= 2 {
        let c = SH_C2.map(k);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let two = k(2.0);
        let four = k(4.0);
        b.extend([
            c[0] * x * y,
            c[1] * y * z,
            c[2] * (two * zz - xx - yy),
            c[3] * x * z,
            c[4] * (xx - yy),
        ]);
        g.extend([
            [c[0] * y, c[0] * x, o],
            [o, c[1] * z, c[1] * y],
            [-two * c[2] * x, -two * c[2] * y, four * c[2] * z],
            [c[3] * z, o, c[3] * x],
            [two * c[4] * x, -two * c[4] * y, o],
        ]);
    }
    if degree >= 3 {
        let c = SH_C3.map(k);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (two, three, four, six, eight) = (k(2.0), k(3.0), k(4.0), k(6.0), k(8.0));
        b.extend([
            c[0] * y * (three * xx - yy),
            c[1] * x * y * z,
            c[2] * y * (four * zz - xx - yy),
            c[3] * z * (two * zz - three * xx - three * yy),
            c[4] * x * (four * zz - xx - yy),
            c[5] * z * (xx - yy),
            c[6] * x * (xx - three * yy),
        ]);
        g.extend([
            [c[0] * six * x * y, c[0] * (three * xx - three * yy), o],
            [c[1] * y * z, c[1] * x * z, c[1] * x * y],
            [-c[2] * two * x * y, c[2] * (four * zz - xx - three * yy), c[2] * eight * y * z],
            [-c[3] * six * x * z, -c[3] * six * y * z, c[3] * (six * zz - three * xx - three * yy)],
            [c[4] * (four * zz - three * xx - yy), -c[4] * two * x * y, c[4] * eight * x * z],
            [c[5] * two * x * z, -c[5] * two * y * z, c[5] * (xx - yy)],
            [c[6] * (three * xx - three * yy), -c[6] * six * x * y, o],
        ]);
    }
    if let Some(out) = grads {
        *out = g;
    }
    b
}

/// SH sum plus 0.5, before clamping.
pub fn sh_color_unclamped<T: Real>(coeffs: &[T], degree: usize, dir: Vec3<T>) -> [T; 3] {
    let basis = sh_basis(degree, dir, None);
    let mut rgb = [T::of(0.5); 3];
    for (b, &y) in basis.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += y * coeffs[b * 3 + ch];
        }
    }
    rgb
}

/// View-dependent RGB of one Gaussian, clamped to `[0, 1]`.
pub fn evaluate_sh_color<T: Real>(coeffs: &[T], degree: usize, dir: Vec3<T>) -> Result<[T; 3], GaussianError> {
    if degree > MAX_SH_DEGREE {
        return Err(GaussianError::ShDegree { degree });
    }
    let expected = num_bases(degree) * 3;
    if coeffs.len() != expected {
        return Err(GaussianError::ShCoefficientCount {
            degree,
            expected,
            actual: coeffs.len(),
        });
    }
    Ok(sh_color_unclamped(coeffs, degree, dir).map(|v| v.max(T::zero()).min(T::one())))
}

/// A Gaussian after perspective projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected<T> {
    /// Pixel coordinates of the centre.
    pub mean: [T; 2],
    /// Screen-space covariance including the low-pass floor.
    pub cov: [[T; 2]; 2],
    pub depth: T,
}

/// Jacobian of the pinhole map at camera-space point `t`.
pub(crate) fn projection_jacobian<T: Real>(cam: &Camera, t: Vec3<T>) -> [[T; 3]; 2] {
    let fx = T::of(cam.fx());
    let fy = T::of(cam.fy());
    let sk = T::of(cam.skew());
    let [x, y, z] = t;
    let iz = T::one() / z;
    let iz2 = iz * iz;
    [
        [fx * iz, sk * iz, -(fx * x + sk * y) * iz2],
        [T::zero(), fy * iz, -fy * y * iz2],
    ]
}

/// EWA projection of a world-space Gaussian. `None` when culled by the near
/// plane.
pub fn project_gaussian<T: Real>(mu: Vec3<T>, sigma: &Mat3<T>, cam: &Camera) -> Option<Projected<T>> {
    let t = cam.world_to_camera(mu);
    if t[2] <= T::of(ZNEAR) {
        return None;
    }
    let (mean, depth) = cam.project_point(mu)?;
    let w = linalg::cast_mat::<T>(&cam.rotation);
    let m = linalg::conjugate(&w, sigma);
    let j = projection_jacobian(cam, t);
    let mut cov = [[T::zero(); 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut s = T::zero();
            for i in 0..3 {
                for k in 0..3 {
                    s += j[a][i] * m[i][k] * j[b][k];
                }
            }
            cov[a][b] = s;
        }
    }
    cov[0][0] += T::of(COV2D_FLOOR);
    cov[1][1] += T::of(COV2D_FLOOR);
    Some(Projected { mean, cov, depth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::axis_angle;

    fn axis_camera() -> Camera {
        Camera::new(
            0,
            [[100.0, 0.0, 32.0], [0.0, 100.0, 32.0], [0.0, 0.0, 1.0]],
            linalg::identity(),
            [0.0; 3],
            64,
            64,
        )
        .unwrap()
    }

    #[test]
    fn identity_rotation_unit_scale_gives_identity_covariance() {
        let s = covariance_from_rotation_scale([1.0f64, 0.0, 0.0, 0.0], [1.0; 3]).unwrap();
        assert_eq!(s, linalg::identity::<f64>());
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = covariance_from_rotation_scale([h, 0.0, 0.0, h], [2.0, 1.0, 1.0]).unwrap();
        let expected = linalg::diag([1.0, 4.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[i][j] - expected[i][j]).abs() < 1e-12, "{s:?}");
            }
        }
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert_eq!(
            covariance_from_rotation_scale([0.0f64; 4], [1.0; 3]),
            Err(GaussianError::ZeroQuaternion)
        );
    }

    #[test]
    fn degree_zero_color_inverts() {
        let c = [0.5 / SH_C0, 0.0, -0.5 / SH_C0];
        let rgb = evaluate_sh_color(&c, 0, [0.0, 0.0, 1.0f64]).unwrap();
        assert!((rgb[0] - 1.0).abs() < 1e-12 && (rgb[1] - 0.5).abs() < 1e-12 && rgb[2].abs() < 1e-12);
    }

    #[test]
    fn zero_coefficients_give_mid_gray() {
        for d in [[0.0, 0.0, 1.0], [0.6, 0.0, -0.8], [0.0, -1.0, 0.0f64]] {
            assert_eq!(evaluate_sh_color(&[0.0; 48], 3, d).unwrap(), [0.5; 3]);
        }
    }

    #[test]
    fn degree_one_band_is_odd() {
        let mut c = vec![0.0f64; 12];
        c[3..12].copy_from_slice(&[0.1, -0.2, 0.05, 0.3, 0.1, -0.1, -0.2, 0.15, 0.2]);
        let d = linalg::normalize([0.3, -0.4, 0.5f64]);
        let nd = d.map(|v| -v);
        let a = sh_color_unclamped(&c, 1, d);
        let b = sh_color_unclamped(&c, 1, nd);
        for ch in 0..3 {
            assert!(((a[ch] - 0.5) + (b[ch] - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_coefficient_count_is_rejected() {
        assert!(matches!(
            evaluate_sh_color(&[0.0f64; 6], 1, [0.0, 0.0, 1.0]),
            Err(GaussianError::ShCoefficientCount { expected: 12, actual: 6, .. })
        ));
    }

    #[test]
    fn sh_basis_gradients_match_finite_differences() {
        let d = [0.31f64, -0.52, 0.79];
        let mut g = Vec::new();
        let _ = sh_basis(3, d, Some(&mut g));
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let bp = sh_basis(3, p, None);
            let bm = sh_basis(3, m, None);
            for b in 0..16 {
                let fd = (bp[b] - bm[b]) / (2.0 * h);
                assert!((fd - g[b][axis]).abs() < 1e-7, "basis {b} axis {axis}");
            }
        }
    }

    #[test]
    fn projection_examples() {
        let cam = axis_camera();
        let p = project_gaussian([0.0, 0.0, 1.0f64], &linalg::identity(), &cam).unwrap();
        assert_eq!(p.mean, [32.0, 32.0]);
        let p = project_gaussian([0.1, 0.0, 1.0f64], &linalg::identity(), &cam).unwrap();
        assert!((p.mean[0] - 42.0).abs() < 1e-12 && (p.mean[1] - 32.0).abs() < 1e-12);

        let (sigma, z) = (0.02f64, 2.0);
        let cov = linalg::mat_scale(&linalg::identity(), sigma * sigma);
        let p = project_gaussian([0.0, 0.0, z], &cov, &cam).unwrap();
        let expected = 100.0 * 100.0 * sigma * sigma / (z * z) + 0.3;
        assert!((p.cov[0][0] - expected).abs() < 1e-9);
        assert!((p.cov[1][1] - expected).abs() < 1e-9);
        assert!(p.cov[0][1].abs() < 1e-12);

        assert!(project_gaussian([0.0, 0.0, -1.0f64], &cov, &cam).is_none());
        assert!(project_gaussian([0.0, 0.0, 0.005f64], &cov, &cam).is_none());
    }

    #[test]
    fn look_at_camera_is_valid_and_centred() {
        let cam = Camera::look_at(3, [4.0, -1.0, 0.5], [0.0, -0.9, 0.0], [0.0, -1.0, 0.0], 70.0, 64, 48);
        cam.validate().unwrap();
        let c = cam.center();
        assert!((c[0] - 4.0).abs() < 1e-12 && (c[1] + 1.0).abs() < 1e-12 && (c[2] - 0.5).abs() < 1e-12);
        let (uv, _) = cam.project_point([0.0, -0.9, 0.0f64]).unwrap();
        assert!((uv[0] - 31.5).abs() < 1e-9 && (uv[1] - 23.5).abs() < 1e-9);
        let _ = axis_angle([0.0, 0.0, 1.0], 0.1f64);
    }
}
