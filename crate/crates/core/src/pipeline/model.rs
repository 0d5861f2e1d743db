//! The trainable model: per-instance canonical Gaussians, the skinning
//! modulators and the shared fusion and interaction networks.

use std::collections::BTreeMap;

use mmgs_diffgrad::nn::{Init, Linear, Module};
use mmgs_diffgrad::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::{
    initialize_gaussian_attributes, modulate_weights, pose_gaussians, positional_encoding, CovarianceBlend,
    InstanceKind, LbsModulator, FALLBACK_SCALE,
};
use crate::error::{CheckpointError, PipelineError};
use crate::fusion::{
    apply_fusion, cross_view_fuse, depth_visibility, lift_features, select_context_views, view_dependent_features,
    FusionConfig, FusionDecoder, ImageEncoder, FEATURE_CHANNELS,
};
use crate::gaussians::{Camera, GaussianSet};
use crate::interaction::{
    active_instances, apply_stage2_updates, build_scene_graph, instance_aabb, Gat, InteractionDecoder, SceneGraph,
    DEGREE_THRESHOLD,
};
use crate::linalg::Vec3;
use crate::rasterizer::{render, GaussianTensors, RasterOptions};
use crate::sceneio::checkpoint::{Checkpoint, NamedTensor};
use crate::sceneio::{Frame, Scene};

use super::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub sh_degree: usize,
    pub fusion: FusionConfig,
    pub covariance_blend: CovarianceBlend,
    /// Cameras never used as context views (held out for evaluation).
    pub holdout: Vec<u32>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            sh_degree: 1,
            fusion: FusionConfig::default(),
            covariance_blend: CovarianceBlend::Raw,
            holdout: Vec::new(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.fusion.validate()?;
        if self.sh_degree > crate::gaussians::MAX_SH_DEGREE {
            return Err(PipelineError::Config(format!("SH degree {} is not supported", self.sh_degree)));
        }
        Ok(())
    }
}

/// Learned state of one instance.
#[derive(Debug, Clone)]
pub struct InstanceParams<T: Real> {
    pub id: u32,
    pub kind: InstanceKind,
    /// Centers are constants; colour, opacity, rotation and scale train.
    pub canonical: GaussianTensors<T>,
    pub modulator: Option<LbsModulator<T>>,
    encoded: Option<Tensor<T>>,
    template_weights: Option<Tensor<T>>,
}

/// Which parts of the stack ran for a frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageActivity {
    pub fusion: bool,
    /// Node features came from pooled lifted features instead of fusion.
    pub lifted_nodes: bool,
    pub interaction: bool,
    /// Instance ids that received interaction residuals.
    pub active: Vec<u32>,
    /// Context camera ids per instance.
    pub context: BTreeMap<u32, Vec<u32>>,
}

/// Gaussians after each stage, per instance.
pub struct FrameStages<T: Real> {
    pub posed: Vec<GaussianTensors<T>>,
    pub refined: Vec<GaussianTensors<T>>,
    pub interacted: Vec<GaussianTensors<T>>,
    pub graph: Option<SceneGraph>,
    pub activity: StageActivity,
}

impl<T: Real> FrameStages<T> {
    /// All instances of the final stage, concatenated.
    pub fn final_gaussians(&self) -> GaussianTensors<T> {
        GaussianTensors::concat(&self.interacted.iter().collect::<Vec<_>>())
    }
}

pub struct FrameOutput<T: Real> {
    /// `[H, W, 3]` per requested camera, in request order.
    pub images: Vec<(u32, Tensor<T>)>,
    pub stages: FrameStages<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub instances: Vec<InstanceParams<T>>,
    pub encoder: ImageEncoder<T>,
    pub fusion: FusionDecoder<T>,
    /// Pooled lifted features to node features, used without fusion.
    pub node_projection: Linear<T>,
    pub gat: Gat<T>,
    pub interaction: InteractionDecoder<T>,
}

fn rows3<T: Real>(t: &Tensor<T>) -> Vec<Vec3<T>> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn image_tensor<T: Real>(cam: &Camera, pixels: &[f32]) -> Tensor<T> {
    Tensor::new(
        &[cam.height as usize, cam.width as usize, 3],
        pixels.iter().map(|&v| T::of(v as f64)).collect(),
    )
}

impl<T: Real> Model<T> {
    /// Fresh model for `scene`. Every variant draws the same initial values
    /// for a given seed; all decoder output layers start at zero.
    pub fn new(scene: &Scene, config: ModelConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut instances = Vec::with_capacity(scene.instances.len());
        for rec in &scene.instances {
            let t = &rec.template;
            let set = initialize_gaussian_attributes(&t.canonical_centers, config.sh_degree, FALLBACK_SCALE).cast::<T>();
            let mut canonical = GaussianTensors::from_set(&set, true);
            canonical.centers = canonical.centers.detach();
            let (modulator, encoded) = match rec.kind {
                InstanceKind::Human => (
                    Some(LbsModulator::new(t.joint_count(), &mut rng)),
                    Some(positional_encoding(&t.canonical_centers)),
                ),
                InstanceKind::Object => (None, None),
            };
            instances.push(InstanceParams {
                id: rec.id,
                kind: rec.kind,
                canonical,
                modulator,
                encoded,
                template_weights: t.weight_tensor(),
            });
        }
        let encoder = ImageEncoder::new(&mut rng);
        let fusion = FusionDecoder::new(config.sh_degree, config.fusion.instance_feature_dim, &mut rng);
        let node_projection = Linear::new(FEATURE_CHANNELS, config.fusion.instance_feature_dim, Init::GlorotUniform, &mut rng);
        let gat = Gat::new(config.fusion.instance_feature_dim, &mut rng);
        let interaction = InteractionDecoder::new(crate::interaction::GAT_HIDDEN, &mut rng);
        let model = Model {
            config,
            instances,
            encoder,
            fusion,
            node_projection,
            gat,
            interaction,
        };
        for (name, t) in model.named_params() {
            let _ = t.named(name);
        }
        Ok(model)
    }

    fn instance_params(&self, inst: &InstanceParams<T>, out: &mut Vec<(String, Tensor<T>)>) {
        let p = format!("instance{}", inst.id);
        out.push((format!("{p}.sh"), inst.canonical.sh.clone()));
        out.push((format!("{p}.opacity_logit"), inst.canonical.opacity_logit.clone()));
        out.push((format!("{p}.rotation"), inst.canonical.rotation.clone()));
        out.push((format!("{p}.log_scale"), inst.canonical.log_scale.clone()));
        if let Some(m) = &inst.modulator {
            m.collect_params(&format!("{p}.lbs"), out);
        }
    }

    /// Every parameter in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for inst in &self.instances {
            self.instance_params(inst, &mut out);
        }
        self.encoder.collect_params("encoder", &mut out);
        self.fusion.collect_params("fusion", &mut out);
        self.node_projection.collect_params("node_projection", &mut out);
        self.gat.collect_params("gat", &mut out);
        self.interaction.collect_params("interaction", &mut out);
        out
    }

    /// Parameters the configured variant trains.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        let v = self.config.variant;
        let mut out = Vec::new();
        for inst in &self.instances {
            self.instance_params(inst, &mut out);
        }
        if v.uses_fusion() || v.uses_interaction() {
            self.encoder.collect_params("encoder", &mut out);
        }
        if v.uses_fusion() {
            self.fusion.collect_params("fusion", &mut out);
        }
        if v.uses_interaction() {
            if !v.uses_fusion() {
                self.node_projection.collect_params("node_projection", &mut out);
            }
            self.gat.collect_params("gat", &mut out);
            self.interaction.collect_params("interaction", &mut out);
        }
        out
    }

    /// Cameras that may serve as context views.
    pub fn context_cameras(&self, scene: &Scene) -> Vec<u32> {
        scene
            .camera_ids()
            .into_iter()
            .filter(|id| !self.config.holdout.contains(id))
            .collect()
    }

    /// Stage 0: skinned or rigid posing of every instance.
    pub fn pose(&self, scene: &Scene, frame: &Frame) -> Result<Vec<GaussianTensors<T>>, PipelineError> {
        let mut out = Vec::with_capacity(self.instances.len());
        for (inst, rec) in self.instances.iter().zip(&scene.instances) {
            let pose = frame.poses.get(&inst.id).ok_or(PipelineError::MissingPose {
                frame: frame.index,
                instance: inst.id,
            })?;
            let weights = match (&inst.template_weights, &inst.modulator, &inst.encoded) {
                (Some(w), Some(m), Some(e)) => Some(modulate_weights(w, &m.predict_modulation(e))),
                _ => None,
            };
            out.push(pose_gaussians(
                &rec.template,
                &inst.canonical,
                pose,
                weights.as_ref(),
                self.config.covariance_blend,
            )?);
        }
        Ok(out)
    }

    /// Runs the three stages for `frame`. Dropout in the graph network is
    /// active only when `rng` is given.
    pub fn stages(
        &self,
        scene: &Scene,
        frame: &Frame,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FrameStages<T>, PipelineError> {
        let v = self.config.variant;
        let posed = self.pose(scene, frame)?;
        let mut activity = StageActivity::default();
        let needs_features = v.uses_fusion() || v.uses_interaction();

        let mut refined = posed.clone();
        let mut node_features: Vec<Tensor<T>> = Vec::new();
        if needs_features {
            let context = self.context_cameras(scene);
            if context.is_empty() {
                return Err(PipelineError::Config("no cameras are left for context views".into()));
            }
            let count = self.config.fusion.context_views.min(context.len());
            let mut feature_maps: BTreeMap<u32, Tensor<T>> = BTreeMap::new();
            let all_centers: Vec<Vec3<f64>> = posed
                .iter()
                .flat_map(|g| rows3(&g.centers))
                .map(|c| c.map(|x| x.as_f64()))
                .collect();
            for (i, inst) in self.instances.iter().enumerate() {
                let areas: Vec<(u32, usize)> = context.iter().map(|&c| (c, scene.mask_area(frame, c, inst.id))).collect();
                let views = select_context_views(&areas, count);
                let centers = rows3(&posed[i].centers);
                let mut per_view = Vec::with_capacity(views.len());
                let mut lifted_views = Vec::with_capacity(views.len());
                for &cam_id in &views {
                    let cam = scene.camera(cam_id).ok_or(PipelineError::UnknownCamera(cam_id))?;
                    if !feature_maps.contains_key(&cam_id) {
                        let pixels = frame.images.get(&cam_id).ok_or(PipelineError::UnknownCamera(cam_id))?;
                        feature_maps.insert(cam_id, self.encoder.encode(&image_tensor(cam, pixels)));
                    }
                    let lifted = lift_features(&feature_maps[&cam_id], &centers, cam);
                    if v.uses_fusion() {
                        per_view.push(view_dependent_features(&lifted, &posed[i]));
                    }
                    lifted_views.push(lifted);
                }
                if v.uses_fusion() {
                    let visible = match self.config.fusion.visibility_tolerance {
                        Some(tol) => {
                            let pts: Vec<Vec3<f64>> = centers.iter().map(|c| c.map(|x| x.as_f64())).collect();
                            let per_cam: Vec<Vec<bool>> = views
                                .iter()
                                .map(|id| depth_visibility(&pts, &all_centers, scene.camera(*id).expect("checked"), tol))
                                .collect();
                            Some((0..pts.len()).map(|g| per_cam.iter().map(|v| v[g]).collect()).collect::<Vec<Vec<bool>>>())
                        }
                        None => None,
                    };
                    let fused = cross_view_fuse(&per_view, self.config.fusion.gamma, visible.as_deref())?;
                    let residuals = self.fusion.decode(&fused);
                    refined[i] = apply_fusion(&posed[i], &residuals);
                    node_features.push(residuals.instance_feature);
                } else {
                    let mut pooled = lifted_views[0].mean_rows();
                    for l in &lifted_views[1..] {
                        pooled = pooled.add(&l.mean_rows());
                    }
                    let pooled = pooled.scale(T::one() / T::of(lifted_views.len() as f64));
                    let node = self.node_projection.forward(&pooled.reshape(&[1, FEATURE_CHANNELS]));
                    node_features.push(node.reshape(&[self.config.fusion.instance_feature_dim]));
                }
                activity.context.insert(inst.id, views);
            }
            activity.fusion = v.uses_fusion();
            activity.lifted_nodes = !v.uses_fusion();
        }

        let mut interacted = refined.clone();
        let mut graph = None;
        if v.uses_interaction() {
            let ids: Vec<u32> = self.instances.iter().map(|i| i.id).collect();
            let boxes = posed
                .iter()
                .map(|g| instance_aabb(&rows3(&g.centers)))
                .collect::<Result<Vec<_>, _>>()?;
            let g = build_scene_graph(&ids, &boxes);
            let active = active_instances(&g, DEGREE_THRESHOLD);
            if !active.is_empty() {
                let d = self.config.fusion.instance_feature_dim;
                let rows: Vec<Tensor<T>> = node_features.iter().map(|f| f.reshape(&[1, d])).collect();
                let x = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>());
                let aggregated = self.gat.forward(&x, &g, rng);
                let residuals = self.interaction.decode(&aggregated.gather_rows(&active));
                interacted = apply_stage2_updates(&refined, &residuals, &active);
                activity.active = active.iter().map(|&i| ids[i]).collect();
            }
            activity.interaction = true;
            graph = Some(g);
        }
        Ok(FrameStages {
            posed,
            refined,
            interacted,
            graph,
            activity,
        })
    }

    /// Renders `frame` from each of `cameras` on a black background.
    pub fn forward_frame(
        &self,
        scene: &Scene,
        frame: &Frame,
        cameras: &[u32],
        raster: &RasterOptions,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FrameOutput<T>, PipelineError> {
        let cams = cameras
            .iter()
            .map(|&id| scene.camera(id).ok_or(PipelineError::UnknownCamera(id)))
            .collect::<Result<Vec<_>, _>>()?;
        let stages = self.stages(scene, frame, rng)?;
        let all = stages.final_gaussians();
        let images = cams
            .iter()
            .map(|cam| Ok((cam.id, render(&all, cam, [T::zero(); 3], raster)?.image)))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(FrameOutput { images, stages })
    }

    /// Final Gaussians of `frame` as a plain set, for rendering outside the
    /// recorded graph.
    pub fn frame_set(&self, scene: &Scene, frame: &Frame) -> Result<GaussianSet<T>, PipelineError> {
        Ok(self.stages(scene, frame, None)?.final_gaussians().to_set())
    }

    /// Renormalises the canonical quaternions in place.
    pub fn normalize_rotations(&self) {
        for inst in &self.instances {
            inst.canonical.rotation.update_data(|q| {
                for row in q.chunks_mut(4) {
                    let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n > T::zero() {
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                }
            });
        }
    }

    /// `"name=norm"` for every parameter.
    pub fn parameter_norms(&self) -> String {
        self.named_params()
            .iter()
            .map(|(n, t)| {
                let s: f64 = t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
                format!("{n}={:.6e}", s.sqrt())
            })
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let tensors = self
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint {
            tensors,
            config: serde_json::json!({ "model": self.config, "run": extra }),
        }
    }

    /// Rebuilds a model for `scene` from a checkpoint written by
    /// [`Model::to_checkpoint`].
    pub fn from_checkpoint(scene: &Scene, checkpoint: &Checkpoint) -> Result<Self, PipelineError> {
        let config: ModelConfig = serde_json::from_value(checkpoint.config["model"].clone()).map_err(|e| {
            CheckpointError::Malformed {
                offset: 0,
                message: format!("configuration echo: {e}"),
            }
        })?;
        let model = Model::new(scene, config)?;
        for (name, t) in model.named_params() {
            let stored = checkpoint.get(&name)?;
            if stored.shape != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: t.shape().to_vec(),
                    actual: stored.shape.clone(),
                }
                .into());
            }
            t.set_data(stored.data.iter().map(|&v| T::of(v as f64)).collect());
        }
        Ok(model)
    }
}
