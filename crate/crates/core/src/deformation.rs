//! Posing canonical templates into a frame: modulated linear blend skinning
//! for humans and rigid motion for objects.

use mmgs_diffgrad::nn::{Init, Mlp, Module};
use mmgs_diffgrad::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::DeformError;
use crate::gaussians::{num_bases, GaussianSet};
use crate::linalg::{self, Mat3, Quat, Vec3};
use crate::rasterizer::GaussianTensors;

/// Bound on the modulation logits, `m = MODULATION_BOUND * tanh(.)`.
pub const MODULATION_BOUND: f64 = 5.0;
pub const ENCODING_OCTAVES: usize = 4;
/// Width of the positional encoding of a canonical point.
pub const ENCODED_DIM: usize = 3 + 3 * 2 * ENCODING_OCTAVES;
/// Scale used when an instance has a single vertex.
pub const FALLBACK_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Human,
    Object,
}

/// Canonical geometry of one instance. Humans carry row-stochastic skinning
/// weights (`V x K`); objects carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedTemplate {
    pub kind: InstanceKind,
    pub canonical_centers: Vec<Vec3<f64>>,
    pub skinning_weights: Option<Vec<Vec<f64>>>,
    pub blend_offsets: Vec<Vec3<f64>>,
}

impl SkinnedTemplate {
    pub fn new(
        kind: InstanceKind,
        canonical_centers: Vec<Vec3<f64>>,
        skinning_weights: Option<Vec<Vec<f64>>>,
        blend_offsets: Option<Vec<Vec3<f64>>>,
    ) -> Result<Self, DeformError> {
        let v = canonical_centers.len();
        let t = SkinnedTemplate {
            kind,
            blend_offsets: blend_offsets.unwrap_or_else(|| vec![[0.0; 3]; v]),
            canonical_centers,
            skinning_weights,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DeformError> {
        let v = self.canonical_centers.len();
        if v == 0 {
            return Err(DeformError::Shape("template has no vertices".into()));
        }
        if self.blend_offsets.len() != v {
            return Err(DeformError::Shape(format!(
                "{} blend offsets for {v} vertices",
                self.blend_offsets.len()
            )));
        }
        match (&self.kind, &self.skinning_weights) {
            (InstanceKind::Human, None) => {
                return Err(DeformError::Shape("human template without skinning weights".into()))
            }
            (InstanceKind::Object, Some(_)) => {
                return Err(DeformError::Shape("object template with skinning weights".into()))
            }
            _ => {}
        }
        if let Some(w) = &self.skinning_weights {
            if w.len() != v {
                return Err(DeformError::Shape(format!("{} weight rows for {v} vertices", w.len())));
            }
            let k = w[0].len();
            if k == 0 {
                return Err(DeformError::Shape("skinning weights have no joints".into()));
            }
            for (i, row) in w.iter().enumerate() {
                if row.len() != k {
                    return Err(DeformError::Weights {
                        vertex: i,
                        reason: format!("{} entries, expected {k}", row.len()),
                    });
                }
                if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return Err(DeformError::Weights {
                        vertex: i,
                        reason: "negative or non-finite weight".into(),
                    });
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(DeformError::Weights {
                        vertex: i,
                        reason: format!("row sums to {s}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.canonical_centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical_centers.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.skinning_weights.as_ref().map_or(0, |w| w[0].len())
    }

    /// Skinning weights as a constant `[V, K]` tensor.
    pub fn weight_tensor<T: Real>(&self) -> Option<Tensor<T>> {
        self.skinning_weights.as_ref().map(|w| {
            Tensor::new(
                &[w.len(), w[0].len()],
                w.iter().flatten().map(|&x| T::of(x)).collect(),
            )
        })
    }
}

fn check_rotation(what: &str, r: &Mat3<f64>) -> Result<(), DeformError> {
    if linalg::is_rotation(r, 1e-6) {
        Ok(())
    } else {
        Err(DeformError::NotRotation(what.to_string()))
    }
}

fn split_matrix(m: &[[f64; 4]; 4]) -> (Mat3<f64>, Vec3<f64>) {
    (
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ],
        [m[0][3], m[1][3], m[2][3]],
    )
}

fn join_matrix(r: &Mat3<f64>, t: Vec3<f64>) -> [[f64; 4]; 4] {
    [
        [r[0][0], r[0][1], r[0][2], t[0]],
        [r[1][0], r[1][1], r[1][2], t[1]],
        [r[2][0], r[2][1], r[2][2], t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// World transforms of the `K` joints of one human in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransforms {
    pub rotations: Vec<Mat3<f64>>,
    pub translations: Vec<Vec3<f64>>,
}

impl JointTransforms {
    pub fn new(rotations: Vec<Mat3<f64>>, translations: Vec<Vec3<f64>>) -> Result<Self, DeformError> {
        if rotations.len() != translations.len() || rotations.is_empty() {
            return Err(DeformError::Shape(format!(
                "{} rotations and {} translations",
                rotations.len(),
                translations.len()
            )));
        }
        for (k, r) in rotations.iter().enumerate() {
            check_rotation(&format!("joint {k} rotation"), r)?;
        }
        Ok(JointTransforms {
            rotations,
            translations,
        })
    }

    pub fn identity(joints: usize) -> Self {
        JointTransforms {
            rotations: vec![linalg::identity(); joints],
            translations: vec![[0.0; 3]; joints],
        }
    }

    /// From row-major homogeneous matrices.
    pub fn from_matrices(ms: &[[[f64; 4]; 4]]) -> Result<Self, DeformError> {
        let (r, t) = ms.iter().map(split_matrix).unzip();
        Self::new(r, t)
    }

    pub fn to_matrices(&self) -> Vec<[[f64; 4]; 4]> {
        self.rotations
            .iter()
            .zip(&self.translations)
            .map(|(r, &t)| join_matrix(r, t))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidPose {
    pub rotation: Mat3<f64>,
    pub translation: Vec3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Mat3<f64>, translation: Vec3<f64>) -> Result<Self, DeformError> {
        check_rotation("object rotation", &rotation)?;
        Ok(RigidPose { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidPose {
            rotation: linalg::identity(),
            translation: [0.0; 3],
        }
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Self, DeformError> {
        let (r, t) = split_matrix(m);
        Self::new(r, t)
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        join_matrix(&self.rotation, self.translation)
    }
}

/// Pose of one instance in one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Pose {
    Joints(JointTransforms),
    Rigid(RigidPose),
}

/// `softmax(w_smpl + m)` per row.
pub fn modulate_weights<T: Real>(w_smpl: &Tensor<T>, m: &Tensor<T>) -> Tensor<T> {
    w_smpl.add(m).softmax_rows()
}

/// Posed centers `sum_k w_k (R_k x + t_k) + b`, differentiable with respect
/// to `w` (`[V, K]`).
///
/// The sum is evaluated as `x + sum_k w_k ((R_k x + t_k) - x) + b`, which is
/// the same value for row-stochastic weights and makes the identity pose
/// reproduce `x` exactly.
pub fn lbs_pose_centers<T: Real>(
    template: &SkinnedTemplate,
    joints: &JointTransforms,
    w: &Tensor<T>,
) -> Result<Tensor<T>, DeformError> {
    let v = template.len();
    let k = joints.len();
    if w.shape() != [v, k] {
        return Err(DeformError::Shape(format!(
            "weights have shape {:?}, expected [{v}, {k}]",
            w.shape()
        )));
    }
    // displacement of every vertex under every joint
    let mut disp = vec![T::zero(); v * k * 3];
    for (i, x) in template.canonical_centers.iter().enumerate() {
        for j in 0..k {
            let p = linalg::add(linalg::mat_vec(&joints.rotations[j], *x), joints.translations[j]);
            for c in 0..3 {
                disp[(i * k + j) * 3 + c] = T::of(p[c] - x[c]);
            }
        }
    }
    let wv = w.to_vec();
    let mut out = vec![T::zero(); v * 3];
    for i in 0..v {
        for c in 0..3 {
            let mut acc = T::zero();
            for j in 0..k {
                acc += wv[i * k + j] * disp[(i * k + j) * 3 + c];
            }
            out[i * 3 + c] = T::of(template.canonical_centers[i][c]) + acc + T::of(template.blend_offsets[i][c]);
        }
    }
    Ok(Tensor::from_op(
        "lbs_pose_centers",
        vec![v, 3],
        out,
        vec![w.clone()],
        Box::new(move |g| {
            let mut dw = vec![T::zero(); v * k];
            for i in 0..v {
                for j in 0..k {
                    let mut s = T::zero();
                    for c in 0..3 {
                        s += g[i * 3 + c] * disp[(i * k + j) * 3 + c];
                    }
                    dw[i * k + j] = s;
                }
            }
            vec![Some(dw)]
        }),
    ))
}

/// Blended matrix `sum_k w_k R_k`; generally not orthonormal.
pub fn blend_rotation(joints: &JointTransforms, w: &[f64]) -> Mat3<f64> {
    let mut r = [[0.0; 3]; 3];
    for (k, rk) in joints.rotations.iter().enumerate() {
        r = linalg::mat_add(&r, &linalg::mat_scale(rk, w[k]));
    }
    r
}

/// `(r0 Sigma_c r0^T, r0)` with `r0` the blended matrix.
pub fn lbs_pose_covariance(sigma_c: &Mat3<f64>, joints: &JointTransforms, w: &[f64]) -> (Mat3<f64>, Mat3<f64>) {
    let r0 = blend_rotation(joints, w);
    (linalg::conjugate(&r0, sigma_c), r0)
}

/// How the posed covariance of a skinned Gaussian is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceBlend {
    /// `A Sigma_c A^T` with `A` the raw weighted blend.
    #[default]
    Raw,
    /// Only the nearest rotation to `A`.
    Polar,
}

/// Per-vertex frames that carry canonical rotations into the posed frame.
///
/// The stored rotation is `polar(A) * r_c` and, for [`CovarianceBlend::Raw`],
/// the stretch `A polar(A)^T` restores `A Sigma_c A^T` exactly. Both are
/// treated as constants with respect to the weights.
pub fn skinning_frames<T: Real>(
    joints: &JointTransforms,
    w: &[T],
    blend: CovarianceBlend,
) -> (Vec<Quat<T>>, Option<Vec<Mat3<T>>>) {
    let k = joints.len();
    let mut quats = Vec::with_capacity(w.len() / k.max(1));
    let mut stretch = Vec::new();
    for row in w.chunks(k) {
        let wf: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        let a = blend_rotation(joints, &wf);
        let p = linalg::nearest_rotation(&a);
        quats.push(linalg::mat_to_quat(&p).map(T::of));
        if blend == CovarianceBlend::Raw {
            stretch.push(linalg::cast_mat(&linalg::mat_mul(&a, &linalg::transpose(&p))));
        }
    }
    let stretch = (blend == CovarianceBlend::Raw).then_some(stretch);
    (quats, stretch)
}

/// Row-wise quaternion product `left[g] * q[g]` for `q: [G, 4]`.
pub fn compose_rotations<T: Real>(left: &[Quat<T>], q: &Tensor<T>) -> Tensor<T> {
    let g = left.len();
    assert_eq!(q.shape(), [g, 4], "compose_rotations: quaternion shape");
    let qv = q.to_vec();
    let mut out = Vec::with_capacity(g * 4);
    for (i, l) in left.iter().enumerate() {
        out.extend(linalg::quat_mul(*l, [qv[i * 4], qv[i * 4 + 1], qv[i * 4 + 2], qv[i * 4 + 3]]));
    }
    let mats: Vec<[[T; 4]; 4]> = left.iter().map(|&l| linalg::quat_left_matrix(l)).collect();
    Tensor::from_op(
        "compose_rotations",
        vec![g, 4],
        out,
        vec![q.clone()],
        Box::new(move |d| {
            let mut dq = vec![T::zero(); g * 4];
            for (i, m) in mats.iter().enumerate() {
                for c in 0..4 {
                    dq[i * 4 + c] = (0..4).map(|r| m[r][c] * d[i * 4 + r]).sum();
                }
            }
            vec![Some(dq)]
        }),
    )
}

/// Stage-zero Gaussians of one instance in one frame.
///
/// `canonical` carries the instance's canonical centers (as constants) and
/// its trainable colour, opacity, rotation and scale. Humans are skinned
/// with `weights` (`[V, K]`, the modulated weights); objects move rigidly
/// and ignore `weights`. Colour, opacity and scale pass through unchanged.
pub fn pose_gaussians<T: Real>(
    template: &SkinnedTemplate,
    canonical: &GaussianTensors<T>,
    pose: &Pose,
    weights: Option<&Tensor<T>>,
    blend: CovarianceBlend,
) -> Result<GaussianTensors<T>, DeformError> {
    if canonical.len() != template.len() {
        return Err(DeformError::Shape(format!(
            "{} canonical Gaussians for a template of {} vertices",
            canonical.len(),
            template.len()
        )));
    }
    let (centers, rotation, stretch) = match (template.kind, pose) {
        (InstanceKind::Human, Pose::Joints(joints)) => {
            let w = weights.ok_or_else(|| DeformError::Shape("human posing needs skinning weights".into()))?;
            let centers = lbs_pose_centers(template, joints, w)?;
            let (frames, stretch) = skinning_frames(joints, &w.data(), blend);
            (centers, compose_rotations(&frames, &canonical.rotation), stretch)
        }
        (InstanceKind::Object, Pose::Rigid(rigid)) => {
            let posed = pose_rigid_object(&template.canonical_centers, rigid)?;
            let centers = Tensor::new(
                &[posed.len(), 3],
                posed.iter().flatten().map(|&v| T::of(v)).collect(),
            );
            let q = linalg::mat_to_quat(&rigid.rotation).map(T::of);
            (centers, compose_rotations(&vec![q; posed.len()], &canonical.rotation), None)
        }
        (kind, _) => {
            return Err(DeformError::Shape(format!("pose does not match a {kind:?} template")));
        }
    };
    Ok(GaussianTensors {
        sh_degree: canonical.sh_degree,
        centers,
        sh: canonical.sh.clone(),
        opacity_logit: canonical.opacity_logit.clone(),
        rotation,
        log_scale: canonical.log_scale.clone(),
        stretch,
    })
}

/// `R_obj v + T_obj` for every vertex.
pub fn pose_rigid_object(vertices: &[Vec3<f64>], pose: &RigidPose) -> Result<Vec<Vec3<f64>>, DeformError> {
    check_rotation("object rotation", &pose.rotation)?;
    Ok(vertices
        .iter()
        .map(|&v| linalg::add(linalg::mat_vec(&pose.rotation, v), pose.translation))
        .collect())
}

/// Mean distance from each point to its nearest neighbour; `None` for fewer
/// than two points.
pub fn mean_nearest_neighbor_distance(points: &[Vec3<f64>]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| linalg::norm(linalg::sub(*p, *q)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Some(total / points.len() as f64)
}

/// Generic starting attributes: zero SH (mid-gray), opacity 0.5, identity
/// rotation, isotropic scale of half the mean nearest-neighbour spacing.
pub fn initialize_gaussian_attributes(centers: &[Vec3<f64>], sh_degree: usize, fallback_scale: f64) -> GaussianSet<f64> {
    let g = centers.len();
    let scale = mean_nearest_neighbor_distance(centers)
        .map(|d| 0.5 * d)
        .filter(|s| *s > 0.0)
        .unwrap_or(fallback_scale);
    GaussianSet {
        sh_degree,
        centers: centers.to_vec(),
        sh: vec![0.0; g * num_bases(sh_degree) * 3],
        opacity_logit: vec![0.0; g],
        rotation: vec![[1.0, 0.0, 0.0, 0.0]; g],
        log_scale: vec![[scale.ln(); 3]; g],
        stretch: None,
    }
}

/// `[x, sin(2^o pi x), cos(2^o pi x)]` for `o < ENCODING_OCTAVES`, per point.
pub fn positional_encoding<T: Real>(points: &[Vec3<f64>]) -> Tensor<T> {
    let mut data = Vec::with_capacity(points.len() * ENCODED_DIM);
    for p in points {
        data.extend(p.iter().map(|&v| T::of(v)));
        for o in 0..ENCODING_OCTAVES {
            let f = (1u32 << o) as f64 * std::f64::consts::PI;
            for &v in p {
                data.push(T::of((f * v).sin()));
                data.push(T::of((f * v).cos()));
            }
        }
    }
    Tensor::new(&[points.len(), ENCODED_DIM], data)
}

/// The weight-modulation network: encoded canonical point to `K` bounded
/// logits. The output layer starts at zero, so skinning starts from the
/// template weights.
#[derive(Debug, Clone)]
pub struct LbsModulator<T: Real> {
    pub mlp: Mlp<T>,
}

impl<T: Real> LbsModulator<T> {
    pub fn new(joints: usize, rng: &mut impl Rng) -> Self {
        LbsModulator {
            mlp: Mlp::new(&[ENCODED_DIM, 64, 64, joints], Init::Zeros, rng),
        }
    }

    pub fn predict_modulation(&self, encoded: &Tensor<T>) -> Tensor<T> {
        self.mlp.forward(encoded).tanh().scale(T::of(MODULATION_BOUND))
    }
}

impl<T: Real> Module<T> for LbsModulator<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.mlp.collect_params(prefix, out);
    }
}
