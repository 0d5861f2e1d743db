//! `scene.json` loading, validation and serialisation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::deformation::{InstanceKind, JointTransforms, Pose, RigidPose, SkinnedTemplate};
use crate::error::SceneError;
use crate::gaussians::Camera;
use crate::rasterizer::{read_float_image, read_png_rgb};

pub const SCENE_FILE: &str = "scene.json";
pub const SCENE_VERSION: u64 = 1;

/// One instance of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub id: u32,
    pub kind: InstanceKind,
    /// As written in `scene.json`, relative to the scene directory.
    pub template_path: String,
    pub template: SkinnedTemplate,
}

/// One frame with its data loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image_paths: BTreeMap<u32, String>,
    pub mask_paths: BTreeMap<u32, String>,
    pub pose_paths: BTreeMap<u32, String>,
    /// Row-major RGB in `[0, 1]` per camera.
    pub images: BTreeMap<u32, Vec<f32>>,
    /// `0` for background, `id + 1` for instance `id`.
    pub masks: BTreeMap<u32, Vec<u8>>,
    pub poses: BTreeMap<u32, Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub root: PathBuf,
    pub cameras: Vec<Camera>,
    pub instances: Vec<InstanceRecord>,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn camera(&self, id: u32) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn camera_ids(&self) -> Vec<u32> {
        self.cameras.iter().map(|c| c.id).collect()
    }

    pub fn frame(&self, index: usize) -> Option<&Frame> {
        self.frames.iter().find(|f| f.index == index)
    }

    /// Pixels of `instance` in the mask of `frame` seen by `camera`.
    pub fn mask_area(&self, frame: &Frame, camera: u32, instance: u32) -> usize {
        frame
            .masks
            .get(&camera)
            .map_or(0, |m| m.iter().filter(|&&v| v as u32 == instance + 1).count())
    }

    /// The `scene.json` document describing this scene.
    pub fn to_json(&self) -> Value {
        let doc = SceneDoc {
            version: SCENE_VERSION,
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraDoc {
                    id: c.id,
                    k: flatten3(&c.intrinsics),
                    r: flatten3(&c.rotation),
                    t: c.translation,
                    width: c.width,
                    height: c.height,
                })
                .collect(),
            instances: self
                .instances
                .iter()
                .map(|i| InstanceDoc {
                    id: i.id,
                    kind: i.kind,
                    template: i.template_path.clone(),
                })
                .collect(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameDoc {
                    index: f.index,
                    images: keyed(&f.image_paths),
                    masks: keyed(&f.mask_paths),
                    poses: keyed(&f.pose_paths),
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("scene document serialises")
    }
}

fn flatten3(m: &[[f64; 3]; 3]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for (i, v) in m.iter().flatten().enumerate() {
        out[i] = *v;
    }
    out
}

fn keyed(m: &BTreeMap<u32, String>) -> BTreeMap<String, String> {
    m.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraDoc {
    pub id: u32,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceDoc {
    pub id: u32,
    pub kind: InstanceKind,
    pub template: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDoc {
    pub index: usize,
    pub images: BTreeMap<String, String>,
    pub masks: BTreeMap<String, String>,
    pub poses: BTreeMap<String, String>,
}

/// The serialised form of `scene.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDoc {
    pub version: u64,
    pub cameras: Vec<CameraDoc>,
    pub instances: Vec<InstanceDoc>,
    pub frames: Vec<FrameDoc>,
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn field<'a>(v: &'a Value, key: &str, ptr: &str) -> Result<&'a Value, SceneError> {
    let obj = v.as_object().ok_or_else(|| schema(ptr, "expected an object"))?;
    obj.get(key).ok_or_else(|| schema(format!("{ptr}/{key}"), "missing field"))
}

fn uint(v: &Value, ptr: &str) -> Result<u64, SceneError> {
    v.as_u64().ok_or_else(|| schema(ptr, "expected a non-negative integer"))
}

fn id32(v: &Value, ptr: &str) -> Result<u32, SceneError> {
    u32::try_from(uint(v, ptr)?).map_err(|_| schema(ptr, "id out of range"))
}

fn numbers<const N: usize>(v: &Value, ptr: &str) -> Result<[f64; N], SceneError> {
    let arr = v.as_array().ok_or_else(|| schema(ptr, format!("expected an array of {N} numbers")))?;
    if arr.len() != N {
        return Err(schema(ptr, format!("expected {N} numbers, found {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (i, x) in arr.iter().enumerate() {
        out[i] = x.as_f64().ok_or_else(|| schema(format!("{ptr}/{i}"), "expected a number"))?;
    }
    Ok(out)
}

fn string<'a>(v: &'a Value, ptr: &str) -> Result<&'a str, SceneError> {
    v.as_str().ok_or_else(|| schema(ptr, "expected a string"))
}

fn array<'a>(v: &'a Value, ptr: &str) -> Result<&'a Vec<Value>, SceneError> {
    v.as_array().ok_or_else(|| schema(ptr, "expected an array"))
}

fn mat3(a: [f64; 9]) -> [[f64; 3]; 3] {
    [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]]
}

/// Escapes a key for use inside a JSON pointer.
fn escape(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

/// `{"<id>": "path"}` keyed by the listed ids, exactly.
fn id_map(v: &Value, ptr: &str, ids: &BTreeSet<u32>, what: &str) -> Result<BTreeMap<u32, String>, SceneError> {
    let obj = v.as_object().ok_or_else(|| schema(ptr, "expected an object"))?;
    let mut out = BTreeMap::new();
    for (key, path) in obj {
        let p = format!("{ptr}/{}", escape(key));
        let id: u32 = key.parse().map_err(|_| schema(&p, format!("key is not a {what} id")))?;
        if !ids.contains(&id) {
            return Err(schema(&p, format!("unknown {what} {id}")));
        }
        out.insert(id, string(path, &p)?.to_string());
    }
    if let Some(missing) = ids.iter().find(|id| !out.contains_key(id)) {
        return Err(schema(ptr, format!("missing entry for {what} {missing}")));
    }
    Ok(out)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_error(path: &Path, message: impl Into<String>) -> SceneError {
    SceneError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_json(path: &Path) -> Result<Value, SceneError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.to_string()))
}

fn rows<const N: usize>(v: Option<&Value>, path: &Path, key: &str) -> Result<Option<Vec<[f64; N]>>, SceneError> {
    let Some(v) = v else { return Ok(None) };
    let arr = v
        .as_array()
        .ok_or_else(|| parse_error(path, format!("\"{key}\" must be an array")))?;
    arr.iter()
        .enumerate()
        .map(|(i, r)| numbers::<N>(r, &format!("/{key}/{i}")).map_err(|e| parse_error(path, e.to_string())))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// Parses a template file: `{"kind", "vertices", "weights"?, "offsets"?}`.
pub fn load_template(path: &Path) -> Result<SkinnedTemplate, SceneError> {
    let v = read_json(path)?;
    let kind: InstanceKind = serde_json::from_value(v.get("kind").cloned().unwrap_or(Value::Null))
        .map_err(|e| parse_error(path, format!("\"kind\": {e}")))?;
    let vertices = rows::<3>(v.get("vertices"), path, "vertices")?
        .ok_or_else(|| parse_error(path, "missing \"vertices\""))?;
    let weights = match v.get("weights") {
        None => None,
        Some(w) => {
            let arr = w
                .as_array()
                .ok_or_else(|| parse_error(path, "\"weights\" must be an array"))?;
            let parsed = arr
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.as_array()
                        .and_then(|r| r.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                        .ok_or_else(|| parse_error(path, format!("/weights/{i} must be an array of numbers")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(parsed)
        }
    };
    let offsets = rows::<3>(v.get("offsets"), path, "offsets")?;
    match (kind, &weights) {
        (InstanceKind::Human, None) => return Err(parse_error(path, "human templates need \"weights\"")),
        (InstanceKind::Object, Some(_)) => return Err(parse_error(path, "object templates carry no \"weights\"")),
        _ => {}
    }
    Ok(SkinnedTemplate::new(kind, vertices, weights, offsets)?)
}

/// Template file contents for `template`.
pub fn template_json(template: &SkinnedTemplate) -> Value {
    let mut v = serde_json::json!({
        "kind": template.kind,
        "vertices": template.canonical_centers,
    });
    if let Some(w) = &template.skinning_weights {
        v["weights"] = serde_json::json!(w);
    }
    if template.blend_offsets.iter().any(|o| *o != [0.0; 3]) {
        v["offsets"] = serde_json::json!(template.blend_offsets);
    }
    v
}

fn matrix4(v: &Value) -> Option<[[f64; 4]; 4]> {
    let arr = v.as_array()?;
    let flat: Vec<f64> = if arr.len() == 16 {
        arr.iter().map(Value::as_f64).collect::<Option<_>>()?
    } else if arr.len() == 4 {
        let mut out = Vec::with_capacity(16);
        for r in arr {
            let r = r.as_array()?;
            if r.len() != 4 {
                return None;
            }
            for x in r {
                out.push(x.as_f64()?);
            }
        }
        out
    } else {
        return None;
    };
    let mut m = [[0.0; 4]; 4];
    for (i, x) in flat.into_iter().enumerate() {
        m[i / 4][i % 4] = x;
    }
    Some(m)
}

/// Parses a pose file for an instance of `template`'s kind. Matrices are
/// 4x4 row-major, nested or flat.
pub fn load_pose(path: &Path, template: &SkinnedTemplate) -> Result<Pose, SceneError> {
    let v = read_json(path)?;
    match template.kind {
        InstanceKind::Human => {
            let arr = v
                .as_array()
                .ok_or_else(|| parse_error(path, "expected an array of joint matrices"))?;
            let ms = arr
                .iter()
                .enumerate()
                .map(|(i, m)| matrix4(m).ok_or_else(|| parse_error(path, format!("/{i} is not a 4x4 matrix"))))
                .collect::<Result<Vec<_>, _>>()?;
            if ms.len() != template.joint_count() {
                return Err(parse_error(
                    path,
                    format!("{} joint matrices for a template with {} joints", ms.len(), template.joint_count()),
                ));
            }
            Ok(Pose::Joints(JointTransforms::from_matrices(&ms)?))
        }
        InstanceKind::Object => {
            let m = matrix4(&v).ok_or_else(|| parse_error(path, "expected one 4x4 matrix"))?;
            Ok(Pose::Rigid(RigidPose::from_matrix(&m)?))
        }
    }
}

pub fn pose_json(pose: &Pose) -> Value {
    match pose {
        Pose::Joints(j) => serde_json::json!(j.to_matrices()),
        Pose::Rigid(r) => serde_json::json!(r.to_matrix()),
    }
}

/// Reads an RGB image: PNG, or the float dump format for anything else.
fn load_image(path: &Path) -> Result<(u32, u32, Vec<f32>), SceneError> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let res = if is_png { read_png_rgb(path) } else { read_float_image(path) };
    res.map_err(|e| parse_error(path, e.to_string()))
}

fn load_mask(path: &Path) -> Result<(u32, u32, Vec<u8>), SceneError> {
    let img = image::open(path).map_err(|e| parse_error(path, e.to_string()))?.into_luma8();
    Ok((img.width(), img.height(), img.into_raw()))
}

fn check_size(path: &Path, cam: &Camera, w: u32, h: u32) -> Result<(), SceneError> {
    if (w, h) != (cam.width, cam.height) {
        return Err(SceneError::ImageSize {
            path: path.to_path_buf(),
            width: cam.width,
            height: cam.height,
            actual_width: w,
            actual_height: h,
        });
    }
    Ok(())
}

/// Loads and validates `dir/scene.json` with every referenced file.
pub fn load_scene(dir: &Path) -> Result<Scene, SceneError> {
    let doc = read_json(&dir.join(SCENE_FILE))?;
    let version = uint(field(&doc, "version", "")?, "/version")?;
    if version != SCENE_VERSION {
        return Err(schema("/version", format!("unsupported version {version}")));
    }

    let mut cameras = Vec::new();
    for (i, c) in array(field(&doc, "cameras", "")?, "/cameras")?.iter().enumerate() {
        let p = format!("/cameras/{i}");
        let id = id32(field(c, "id", &p)?, &format!("{p}/id"))?;
        let k = numbers::<9>(field(c, "K", &p)?, &format!("{p}/K"))?;
        let r = numbers::<9>(field(c, "R", &p)?, &format!("{p}/R"))?;
        let t = numbers::<3>(field(c, "t", &p)?, &format!("{p}/t"))?;
        let width = id32(field(c, "width", &p)?, &format!("{p}/width"))?;
        let height = id32(field(c, "height", &p)?, &format!("{p}/height"))?;
        if cameras.iter().any(|c: &Camera| c.id == id) {
            return Err(schema(format!("{p}/id"), format!("duplicate camera id {id}")));
        }
        let cam = Camera::new(id, mat3(k), mat3(r), t, width, height).map_err(|e| schema(&p, e.to_string()))?;
        cameras.push(cam);
    }
    if cameras.is_empty() {
        return Err(schema("/cameras", "scene has no cameras"));
    }

    let mut instances: Vec<InstanceRecord> = Vec::new();
    for (i, inst) in array(field(&doc, "instances", "")?, "/instances")?.iter().enumerate() {
        let p = format!("/instances/{i}");
        let id = id32(field(inst, "id", &p)?, &format!("{p}/id"))?;
        if id >= 255 {
            return Err(schema(format!("{p}/id"), "instance ids must be below 255 to fit the mask encoding"));
        }
        if instances.iter().any(|r| r.id == id) {
            return Err(schema(format!("{p}/id"), format!("duplicate instance id {id}")));
        }
        let kind: InstanceKind = serde_json::from_value(field(inst, "kind", &p)?.clone())
            .map_err(|_| schema(format!("{p}/kind"), "expected \"human\" or \"object\""))?;
        let template_path = string(field(inst, "template", &p)?, &format!("{p}/template"))?.to_string();
        let template = load_template(&dir.join(&template_path))?;
        if template.kind != kind {
            return Err(schema(format!("{p}/kind"), "does not match the template's kind"));
        }
        instances.push(InstanceRecord {
            id,
            kind,
            template_path,
            template,
        });
    }
    if instances.is_empty() {
        return Err(schema("/instances", "scene has no instances"));
    }

    let camera_ids: BTreeSet<u32> = cameras.iter().map(|c| c.id).collect();
    let instance_ids: BTreeSet<u32> = instances.iter().map(|r| r.id).collect();
    let allowed: BTreeSet<u8> = std::iter::once(0).chain(instances.iter().map(|r| r.id as u8 + 1)).collect();
    let mut frames: Vec<Frame> = Vec::new();
    for (i, f) in array(field(&doc, "frames", "")?, "/frames")?.iter().enumerate() {
        let p = format!("/frames/{i}");
        let index = uint(field(f, "index", &p)?, &format!("{p}/index"))? as usize;
        if frames.iter().any(|fr| fr.index == index) {
            return Err(schema(format!("{p}/index"), format!("duplicate frame index {index}")));
        }
        let image_paths = id_map(field(f, "images", &p)?, &format!("{p}/images"), &camera_ids, "camera")?;
        let mask_paths = id_map(field(f, "masks", &p)?, &format!("{p}/masks"), &camera_ids, "camera")?;
        let pose_paths = id_map(field(f, "poses", &p)?, &format!("{p}/poses"), &instance_ids, "instance")?;

        let mut images = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for cam in &cameras {
            let ip = dir.join(&image_paths[&cam.id]);
            let (w, h, px) = load_image(&ip)?;
            check_size(&ip, cam, w, h)?;
            images.insert(cam.id, px);
            let mp = dir.join(&mask_paths[&cam.id]);
            let (w, h, m) = load_mask(&mp)?;
            check_size(&mp, cam, w, h)?;
            if let Some(&bad) = m.iter().find(|v| !allowed.contains(v)) {
                return Err(SceneError::MaskValue { path: mp, value: bad });
            }
            masks.insert(cam.id, m);
        }
        let mut poses = BTreeMap::new();
        for inst in &instances {
            poses.insert(inst.id, load_pose(&dir.join(&pose_paths[&inst.id]), &inst.template)?);
        }
        frames.push(Frame {
            index,
            image_paths,
            mask_paths,
            pose_paths,
            images,
            masks,
            poses,
        });
    }
    if frames.is_empty() {
        return Err(schema("/frames", "scene has no frames"));
    }
    Ok(Scene {
        root: dir.to_path_buf(),
        cameras,
        instances,
        frames,
    })
}
