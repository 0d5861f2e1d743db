//! Procedural multi-human, multi-object scenes rendered from a teacher
//! Gaussian set.
//!
//! Humans are four-bone capsule figures in a spread-limb rest pose, objects
//! are boxes. Every object starts in contact with a human and drifts away in
//! later frames. Instances that touch in a frame are rendered slightly
//! darker, so the scene carries a contact-dependent appearance change.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use mmgs_diffgrad::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::{
    initialize_gaussian_attributes, modulate_weights, pose_gaussians, CovarianceBlend, InstanceKind, JointTransforms,
    Pose, RigidPose, SkinnedTemplate,
};
use crate::error::SceneError;
use crate::gaussians::{logit, num_bases, Camera, GaussianSet, SH_C0};
use crate::interaction::{active_instances, build_scene_graph, instance_aabb, DEGREE_THRESHOLD};
use crate::linalg::{self, Mat3, Vec3};
use crate::rasterizer::{rasterize_reference, write_float_image, write_png_rgb, GaussianTensors};

use super::scene::{pose_json, template_json, Frame, InstanceRecord, Scene, SCENE_FILE};

pub const JOINTS: usize = 4;
pub const HUMAN_VERTICES: usize = 200;
/// Shift of the degree-0 colour of instances that touch another instance.
pub const CONTACT_SHADE: f64 = -0.1;
const HUMAN_SPACING: f64 = 1.6;
const RING_RADIUS: f64 = 4.0;
const RING_HEIGHT: f64 = 1.6;
const TARGET: Vec3<f64> = [0.0, 0.8, 0.0];
const FOV_DEGREES: f64 = 50.0;

/// Bones of the rest pose: segment ends and capsule radius.
const BONES: [(Vec3<f64>, Vec3<f64>, f64); JOINTS] = [
    ([0.0, 0.1, 0.0], [0.0, 0.8, 0.0], 0.15),
    ([0.0, 0.8, 0.0], [0.0, 1.5, 0.0], 0.17),
    ([0.22, 1.38, 0.0], [0.62, 1.02, 0.0], 0.06),
    ([-0.22, 1.38, 0.0], [-0.62, 1.02, 0.0], 0.06),
];
const BONE_VERTICES: [usize; JOINTS] = [60, 70, 35, 35];
const HIP: Vec3<f64> = [0.0, 0.8, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub humans: usize,
    pub objects: usize,
    pub cameras: usize,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            humans: 2,
            objects: 1,
            cameras: 4,
            frames: 3,
            width: 64,
            height: 64,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Generate(m.to_string()));
        if self.humans == 0 || self.objects == 0 || self.cameras == 0 || self.frames == 0 {
            return bad("instance, camera and frame counts must be at least 1");
        }
        if self.humans + self.objects > 254 {
            return bad("at most 254 instances fit the mask encoding");
        }
        if self.width < 32 || self.height < 32 {
            return bad("resolution must be at least 32x32");
        }
        Ok(())
    }
}

/// A generated scene held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub scene: Scene,
    /// Canonical teacher Gaussians per instance (before posing and shading).
    pub teacher: Vec<GaussianSet<f64>>,
    /// Indices into `scene.instances` that touch another instance, per frame.
    pub contacts: Vec<Vec<usize>>,
}

impl SyntheticScene {
    /// The posed, shaded teacher of one frame, all instances concatenated.
    pub fn teacher_frame(&self, frame: usize) -> Result<GaussianSet<f64>, SceneError> {
        let f = &self.scene.frames[frame];
        let parts = self
            .scene
            .instances
            .iter()
            .zip(&self.teacher)
            .map(|(inst, canon)| posed_teacher(&inst.template, canon, &f.poses[&inst.id]))
            .collect::<Result<Vec<_>, _>>()?;
        let mut parts = parts;
        for &i in &self.contacts[frame] {
            shade(&mut parts[i], CONTACT_SHADE);
        }
        Ok(GaussianSet::concat(&parts.iter().collect::<Vec<_>>()))
    }
}

fn posed_teacher(template: &SkinnedTemplate, canonical: &GaussianSet<f64>, pose: &Pose) -> Result<GaussianSet<f64>, SceneError> {
    let tensors = GaussianTensors::from_set(canonical, false);
    let weights = template
        .weight_tensor::<f64>()
        .map(|w| modulate_weights(&w, &Tensor::zeros(w.shape())));
    Ok(pose_gaussians(template, &tensors, pose, weights.as_ref(), CovarianceBlend::Raw)?.to_set())
}

fn shade(set: &mut GaussianSet<f64>, delta: f64) {
    let stride = set.bases() * 3;
    for g in 0..set.len() {
        for c in 0..3 {
            set.sh[g * stride + c] += delta / SH_C0;
        }
    }
}

fn closest_on_segment(p: Vec3<f64>, a: Vec3<f64>, b: Vec3<f64>) -> Vec3<f64> {
    let ab = linalg::sub(b, a);
    let t = (linalg::dot(linalg::sub(p, a), ab) / linalg::dot(ab, ab)).clamp(0.0, 1.0);
    linalg::add(a, linalg::scale(ab, t))
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = linalg::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return linalg::scale(v, 1.0 / n);
        }
    }
}

/// Greedy farthest-point subset of `count` candidates, starting from the first.
fn farthest_points(candidates: &[Vec3<f64>], count: usize) -> Vec<Vec3<f64>> {
    let mut chosen = vec![candidates[0]];
    let mut dist: Vec<f64> = candidates.iter().map(|&c| linalg::norm(linalg::sub(c, candidates[0]))).collect();
    while chosen.len() < count.min(candidates.len()) {
        let (best, _) = dist
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        let p = candidates[best];
        chosen.push(p);
        for (d, &c) in dist.iter_mut().zip(candidates) {
            *d = d.min(linalg::norm(linalg::sub(c, p)));
        }
    }
    chosen
}

/// Capsule figure with inverse-distance skinning weights.
pub fn capsule_human(rng: &mut ChaCha8Rng) -> SkinnedTemplate {
    let mut vertices = Vec::with_capacity(HUMAN_VERTICES);
    for (&(a, b, r), &count) in BONES.iter().zip(&BONE_VERTICES) {
        let candidates: Vec<Vec3<f64>> = (0..count * 6)
            .map(|_| {
                let t = rng.gen_range(-0.15..1.15);
                let p = linalg::add(linalg::add(a, linalg::scale(linalg::sub(b, a), t)), linalg::scale(unit_vector(rng), r));
                let s = closest_on_segment(p, a, b);
                let d = linalg::sub(p, s);
                let n = linalg::norm(d);
                let dir = if n > 1e-9 { linalg::scale(d, 1.0 / n) } else { unit_vector(rng) };
                linalg::add(s, linalg::scale(dir, r))
            })
            .collect();
        vertices.extend(farthest_points(&candidates, count));
    }
    let weights = vertices
        .iter()
        .map(|&v| {
            let raw: Vec<f64> = BONES
                .iter()
                .map(|&(a, b, _)| {
                    let d = linalg::norm(linalg::sub(v, closest_on_segment(v, a, b)));
                    1.0 / (d.powi(4) + 1e-6)
                })
                .collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|x| x / total).collect()
        })
        .collect();
    SkinnedTemplate::new(InstanceKind::Human, vertices, Some(weights), None).expect("capsule template is valid")
}

/// Regular samples on the faces of a cube of half-size `half`, 16 per face.
pub fn box_object(half: f64) -> SkinnedTemplate {
    let mut vertices = Vec::with_capacity(96);
    let steps = 4;
    let coord = |i: usize| half * (2.0 * (i as f64 + 0.5) / steps as f64 - 1.0);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            for i in 0..steps {
                for j in 0..steps {
                    let mut p = [0.0; 3];
                    p[axis] = sign * half;
                    p[(axis + 1) % 3] = coord(i);
                    p[(axis + 2) % 3] = coord(j);
                    vertices.push(p);
                }
            }
        }
    }
    SkinnedTemplate::new(InstanceKind::Object, vertices, None, None).expect("box template is valid")
}

/// `x -> R x + t`.
#[derive(Debug, Clone, Copy)]
struct Affine {
    r: Mat3<f64>,
    t: Vec3<f64>,
}

impl Affine {
    fn rotation_about(pivot: Vec3<f64>, r: Mat3<f64>) -> Affine {
        Affine {
            r,
            t: linalg::sub(pivot, linalg::mat_vec(&r, pivot)),
        }
    }

    fn then(self, outer: Affine) -> Affine {
        Affine {
            r: linalg::mat_mul(&outer.r, &self.r),
            t: linalg::add(linalg::mat_vec(&outer.r, self.t), outer.t),
        }
    }
}

/// Smooth per-human articulation parameters.
struct Motion {
    phases: [f64; 5],
}

impl Motion {
    fn joints(&self, base_x: f64, frame: usize) -> JointTransforms {
        let f = frame as f64;
        let p = &self.phases;
        let yaw = 0.25 * (p[0] + 0.7 * f).sin();
        let root = Affine {
            r: linalg::axis_angle([0.0, 1.0, 0.0], yaw),
            t: [base_x, 0.0, 0.05 * (p[1] + 0.6 * f).sin()],
        };
        let bend = Affine::rotation_about(HIP, linalg::axis_angle([1.0, 0.0, 0.0], 0.2 * (p[2] + 0.8 * f).sin()));
        let torso = bend.then(root);
        let left = Affine::rotation_about(BONES[2].0, linalg::axis_angle([0.0, 0.0, 1.0], 0.35 * (p[3] + 0.9 * f).sin()));
        let right = Affine::rotation_about(BONES[3].0, linalg::axis_angle([0.0, 0.0, 1.0], -0.35 * (p[4] + 0.9 * f).sin()));
        let all = [root, torso, left.then(torso), right.then(torso)];
        JointTransforms::new(all.iter().map(|a| a.r).collect(), all.iter().map(|a| a.t).collect())
            .expect("articulation produces rotations")
    }
}

fn ring_cameras(spec: &SyntheticSpec) -> Vec<Camera> {
    let focal = 0.5 * spec.width as f64 / (0.5 * FOV_DEGREES.to_radians()).tan();
    (0..spec.cameras)
        .map(|c| {
            let a = PI / 9.0 + 2.0 * PI * c as f64 / spec.cameras as f64;
            let eye = [RING_RADIUS * a.sin(), RING_HEIGHT, RING_RADIUS * a.cos()];
            Camera::look_at(c as u32, eye, TARGET, [0.0, 1.0, 0.0], focal, spec.width, spec.height)
        })
        .collect()
}

fn teacher_set(template: &SkinnedTemplate, colors: &[Vec3<f64>], rng: &mut ChaCha8Rng) -> GaussianSet<f64> {
    let mut set = initialize_gaussian_attributes(&template.canonical_centers, 1, crate::deformation::FALLBACK_SCALE);
    let stride = num_bases(1) * 3;
    for g in 0..set.len() {
        let base = colors[g];
        for c in 0..3 {
            let v = (base[c] + rng.gen_range(-0.06..0.06)).clamp(0.25, 0.9);
            set.sh[g * stride + c] = (v - 0.5) / SH_C0;
        }
        set.opacity_logit[g] = logit(rng.gen_range(0.6..0.85));
        for k in 0..3 {
            set.log_scale[g][k] += rng.gen_range(0.9f64..1.6).ln();
        }
    }
    set
}

fn random_color(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    [0, 1, 2].map(|_| rng.gen_range(0.3..0.85))
}

/// Instance whose Gaussians contribute most to each pixel of the joint
/// render, kept where that instance alone reaches alpha above one half.
fn instance_mask(parts: &[GaussianSet<f64>], ids: &[u32], cam: &Camera) -> Result<Vec<u8>, SceneError> {
    let n = (cam.width * cam.height) as usize;
    let mut best = vec![(0.0f64, 0u8); n];
    for (i, part) in parts.iter().enumerate() {
        let colored: Vec<GaussianSet<f64>> = parts
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let mut p = p.clone();
                let v = if i == j { 0.5 / SH_C0 } else { -0.5 / SH_C0 };
                let stride = p.bases() * 3;
                for (k, x) in p.sh.iter_mut().enumerate() {
                    *x = if k % stride < 3 { v } else { 0.0 };
                }
                p
            })
            .collect();
        let joint = GaussianSet::concat(&colored.iter().collect::<Vec<_>>());
        let contribution = rasterize_reference(&joint, cam, [0.0; 3])?;
        let solo = rasterize_reference(part, cam, [0.0; 3])?;
        for p in 0..n {
            let c = contribution.pixels[p * 3];
            if solo.alpha[p] > 0.5 && c > best[p].0 {
                best[p] = (c, ids[i] as u8 + 1);
            }
        }
    }
    Ok(best.into_iter().map(|(_, v)| v).collect())
}

/// Builds a scene and its ground truth in memory. Paths in the returned
/// scene are relative; `scene.root` is empty.
pub fn build_synthetic_scene(spec: &SyntheticSpec) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cameras = ring_cameras(spec);

    let mut instances = Vec::new();
    let mut teacher = Vec::new();
    let mut motions = Vec::new();
    for h in 0..spec.humans {
        let template = capsule_human(&mut rng);
        let shirt = random_color(&mut rng);
        let trousers = random_color(&mut rng);
        let colors: Vec<Vec3<f64>> = template
            .skinning_weights
            .as_ref()
            .expect("humans are skinned")
            .iter()
            .map(|w| if w[0] > w[1] { trousers } else { shirt })
            .collect();
        teacher.push(teacher_set(&template, &colors, &mut rng));
        motions.push(Motion {
            phases: [0; 5].map(|_| rng.gen_range(0.0..2.0 * PI)),
        });
        instances.push(InstanceRecord {
            id: h as u32,
            kind: InstanceKind::Human,
            template_path: format!("templates/instance_{h}.json"),
            template,
        });
    }
    let base_x = |h: usize| (h as f64 - (spec.humans as f64 - 1.0) / 2.0) * HUMAN_SPACING;

    let human_poses: Vec<Vec<JointTransforms>> = motions
        .iter()
        .enumerate()
        .map(|(h, m)| (0..spec.frames).map(|f| m.joints(base_x(h), f)).collect())
        .collect();

    let mut object_paths = Vec::new();
    for o in 0..spec.objects {
        let id = (spec.humans + o) as u32;
        let half = rng.gen_range(0.15..0.2);
        let template = box_object(half);
        let color = random_color(&mut rng);
        teacher.push(teacher_set(&template, &vec![color; template.len()], &mut rng));

        // Start overlapping the partner's frame-0 box by a few centimetres
        // on the front or back side, then drift outwards.
        let partner = o % spec.humans;
        let side = if (o / spec.humans) % 2 == 0 { 1.0 } else { -1.0 };
        let posed = posed_teacher(&instances[partner].template, &teacher[partner], &Pose::Joints(human_poses[partner][0].clone()))?;
        let hb = instance_aabb(&posed.centers).map_err(|e| SceneError::Generate(e.to_string()))?;
        let face = if side > 0.0 { hb.max[2] } else { hb.min[2] };
        let start = [base_x(partner) + rng.gen_range(-0.1..0.1), 0.75 + 0.3 * (o / (2 * spec.humans)) as f64, face + side * (half - 0.05)];
        let spin = rng.gen_range(-0.3..0.3);
        let path: Vec<RigidPose> = (0..spec.frames)
            .map(|f| {
                let f = f as f64;
                let t = [start[0], start[1], start[2] + side * 0.3 * f.min(3.0)];
                RigidPose::new(linalg::axis_angle([0.0, 1.0, 0.0], spin * f), t).expect("axis-angle is a rotation")
            })
            .collect();
        object_paths.push(path);
        instances.push(InstanceRecord {
            id,
            kind: InstanceKind::Object,
            template_path: format!("templates/instance_{id}.json"),
            template,
        });
    }

    let ids: Vec<u32> = instances.iter().map(|r| r.id).collect();
    let mut frames = Vec::new();
    let mut contacts = Vec::new();
    for f in 0..spec.frames {
        let mut poses = BTreeMap::new();
        for (h, p) in human_poses.iter().enumerate() {
            poses.insert(h as u32, Pose::Joints(p[f].clone()));
        }
        for (o, p) in object_paths.iter().enumerate() {
            poses.insert((spec.humans + o) as u32, Pose::Rigid(p[f].clone()));
        }
        let mut parts = instances
            .iter()
            .zip(&teacher)
            .map(|(inst, canon)| posed_teacher(&inst.template, canon, &poses[&inst.id]))
            .collect::<Result<Vec<_>, _>>()?;
        let boxes = parts
            .iter()
            .map(|p| instance_aabb(&p.centers))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| SceneError::Generate(e.to_string()))?;
        let graph = build_scene_graph(&ids, &boxes);
        let active = active_instances(&graph, DEGREE_THRESHOLD);
        for &i in &active {
            shade(&mut parts[i], CONTACT_SHADE);
        }
        let joint = GaussianSet::concat(&parts.iter().collect::<Vec<_>>());

        let dir = format!("{f:04}");
        let mut frame = Frame {
            index: f,
            image_paths: BTreeMap::new(),
            mask_paths: BTreeMap::new(),
            pose_paths: ids.iter().map(|&id| (id, format!("poses/{dir}/instance_{id}.json"))).collect(),
            images: BTreeMap::new(),
            masks: BTreeMap::new(),
            poses,
        };
        for cam in &cameras {
            let img = rasterize_reference(&joint, cam, [0.0; 3])?;
            frame.images.insert(cam.id, img.pixels.iter().map(|&v| v as f32).collect());
            frame.masks.insert(cam.id, instance_mask(&parts, &ids, cam)?);
            frame.image_paths.insert(cam.id, format!("images/{dir}/cam_{}.mmgsimg", cam.id));
            frame.mask_paths.insert(cam.id, format!("masks/{dir}/cam_{}.png", cam.id));
        }
        frames.push(frame);
        contacts.push(active);
    }
    if contacts.iter().all(Vec::is_empty) {
        return Err(SceneError::Generate("no frame has an interaction edge".into()));
    }
    Ok(SyntheticScene {
        spec: *spec,
        scene: Scene {
            root: Default::default(),
            cameras,
            instances,
            frames,
        },
        teacher,
        contacts,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), SceneError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let text = serde_json::to_string_pretty(value).expect("JSON values serialise");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes `scene.json`, templates, poses, float ground-truth images with PNG
/// previews, and id+1 masks under `dir`.
pub fn write_synthetic_scene(synthetic: &SyntheticScene, dir: &Path) -> Result<(), SceneError> {
    let scene = &synthetic.scene;
    for inst in &scene.instances {
        write_json(&dir.join(&inst.template_path), &template_json(&inst.template))?;
    }
    for frame in &scene.frames {
        for (id, path) in &frame.pose_paths {
            write_json(&dir.join(path), &pose_json(&frame.poses[id]))?;
        }
        for cam in &scene.cameras {
            let path = dir.join(&frame.image_paths[&cam.id]);
            let parent = path.parent().expect("image paths have a directory");
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            let pixels = &frame.images[&cam.id];
            write_float_image(&path, cam.width, cam.height, pixels).map_err(io_err(&path))?;
            let preview = path.with_extension("png");
            write_png_rgb(&preview, cam.width, cam.height, pixels).map_err(io_err(&preview))?;

            let path = dir.join(&frame.mask_paths[&cam.id]);
            let parent = path.parent().expect("mask paths have a directory");
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            image::GrayImage::from_raw(cam.width, cam.height, frame.masks[&cam.id].clone())
                .expect("mask matches the camera size")
                .save(&path)
                .map_err(|e| SceneError::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
        }
    }
    write_json(&dir.join(SCENE_FILE), &scene.to_json())
}

/// Generates a scene into `dir` and returns it with `root` set to `dir`.
pub fn generate_synthetic_scene(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticScene, SceneError> {
    let mut synthetic = build_synthetic_scene(spec)?;
    write_synthetic_scene(&synthetic, dir)?;
    synthetic.scene.root = dir.to_path_buf();
    Ok(synthetic)
}
