//! Small fixed-size vector, matrix and quaternion helpers.
//!
//! Quaternions are stored `(w, x, y, z)`.

use mmgs_diffgrad::Real;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];
pub type Quat<T> = [T; 4];

pub fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn diag<T: Real>(d: Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[d[0], z, z], [z, d[1], z], [z, z, d[2]]]
}

pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn normalize<T: Real>(a: Vec3<T>) -> Vec3<T> {
    scale(a, T::one() / norm(a))
}

pub fn mat_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `m^T v`
pub fn mat_t_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn mat_add<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += b[i][j];
        }
    }
    out
}

pub fn mat_scale<T: Real>(a: &Mat3<T>, s: T) -> Mat3<T> {
    let mut out = *a;
    out.iter_mut().flatten().for_each(|v| *v *= s);
    out
}

pub fn det<T: Real>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `a m a^T`
pub fn conjugate<T: Real>(a: &Mat3<T>, m: &Mat3<T>) -> Mat3<T> {
    mat_mul(&mat_mul(a, m), &transpose(a))
}

pub fn cast_mat<T: Real>(m: &Mat3<f64>) -> Mat3<T> {
    m.map(|r| r.map(T::of))
}

pub fn cast_vec<T: Real>(v: &Vec3<f64>) -> Vec3<T> {
    v.map(T::of)
}

/// True when `m` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation<T: Real>(m: &Mat3<T>, tol: f64) -> bool {
    let mtm = mat_mul(&transpose(m), m);
    let id = identity::<T>();
    let ortho = (0..3).all(|i| (0..3).all(|j| (mtm[i][j] - id[i][j]).abs().as_f64() <= tol));
    ortho && (det(m).as_f64() - 1.0).abs() <= tol
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle<T: Real>(axis: Vec3<T>, angle: T) -> Mat3<T> {
    let a = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    let [x, y, z] = a;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn quat_norm<T: Real>(q: Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of the normalised quaternion. Callers must reject the
/// zero quaternion first.
pub fn quat_to_mat<T: Real>(q: Quat<T>) -> Mat3<T> {
    let n = quat_norm(q);
    let [w, x, y, z] = q.map(|v| v / n);
    let two = T::of(2.0);
    let one = T::one();
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Gradient of `L(R(n))` with respect to the unit quaternion `n`, given
/// `dR = dL/dR`.
pub fn quat_to_mat_backward<T: Real>(n: Quat<T>, dr: &Mat3<T>) -> Quat<T> {
    let [w, x, y, z] = n;
    let two = T::of(2.0);
    let four = T::of(4.0);
    let z0 = T::zero();
    // partials[i][j] = dR_ij / d(w, x, y, z)
    let partials: [[Quat<T>; 3]; 3] = [
        [
            [z0, z0, -four * y, -four * z],
            [-two * z, two * y, two * x, -two * w],
            [two * y, two * z, two * w, two * x],
        ],
        [
            [two * z, two * y, two * x, two * w],
            [z0, -four * x, z0, -four * z],
            [-two * x, -two * w, two * z, two * y],
        ],
        [
            [-two * y, two * z, -two * w, two * x],
            [two * x, two * w, two * z, two * y],
            [z0, -four * x, -four * y, z0],
        ],
    ];
    let mut out = [T::zero(); 4];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..4 {
                out[k] += dr[i][j] * partials[i][j][k];
            }
        }
    }
    out
}

/// Hamilton product `a * b` (apply `b` first, then `a`).
pub fn quat_mul<T: Real>(a: Quat<T>, b: Quat<T>) -> Quat<T> {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Left-multiplication matrix: `quat_mul(a, b) = L(a) b`.
pub fn quat_left_matrix<T: Real>(a: Quat<T>) -> [[T; 4]; 4] {
    let [w, x, y, z] = a;
    [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
}

/// Unit quaternion of a rotation matrix, with non-negative `w`.
pub fn mat_to_quat<T: Real>(m: &Mat3<T>) -> Quat<T> {
    let m64 = m.map(|r| r.map(|v| v.as_f64()));
    let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_fn(|i, j| m64[i][j]));
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let mut out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        out = out.map(|v| -v);
    }
    out.map(T::of)
}

/// Nearest rotation to `m` in the Frobenius sense (orthogonal polar factor
/// with the determinant forced to +1). Rank-deficient inputs still yield a
/// proper rotation.
pub fn nearest_rotation<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let a = nalgebra::Matrix3::from_fn(|i, j| m[i][j].as_f64());
    let svd = a.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        // flip the direction of the smallest singular value
        let k = (0..3)
            .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
            .unwrap();
        u2.column_mut(k).neg_mut();
        r = u2 * v_t;
    }
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = T::of(r[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quaternion_matrix_round_trip() {
        let r = axis_angle([0.3, -0.5, 0.8], 1.1f64);
        let q = mat_to_quat(&r);
        let back = quat_to_mat(q);
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[i][j] - r[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quat_mul_composes_rotations() {
        let a = axis_angle([0.0, 0.0, 1.0], 0.7f64);
        let b = axis_angle([1.0, 0.2, 0.0], -0.4f64);
        let q = quat_mul(mat_to_quat(&a), mat_to_quat(&b));
        let m = quat_to_mat(q);
        let ab = mat_mul(&a, &b);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - ab[i][j]).abs() < 1e-12);
            }
        }
        let l = quat_left_matrix(mat_to_quat(&a));
        let qb = mat_to_quat(&b);
        for k in 0..4 {
            let v: f64 = (0..4).map(|c| l[k][c] * qb[c]).sum();
            assert!((v - q[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_rotation_of_rotation_is_itself() {
        let r = axis_angle([1.0, 1.0, 0.0], 2.0f64);
        let p = nearest_rotation(&r);
        assert!(is_rotation(&p, 1e-10));
        for i in 0..3 {
            for j in 0..3 {
                assert!((p[i][j] - r[i][j]).abs() < 1e-10);
            }
        }
        let degenerate = diag([0.0, 0.0, 1.0]);
        assert!(is_rotation(&nearest_rotation(&degenerate), 1e-10));
    }
}
