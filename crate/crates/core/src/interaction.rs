//! Scene-level interaction refinement.
//!
//! Instances whose bounding boxes touch are linked in a per-frame scene
//! graph. A two-layer graph attention network mixes the instance features
//! along those links and a small decoder turns each connected instance's
//! feature into a translation, a base-colour shift and an opacity shift that
//! apply to all of its Gaussians.

use mmgs_diffgrad::nn::{init_values, Init, Mlp, Module};
use mmgs_diffgrad::{masked_attention, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::InteractionError;
use crate::linalg::Vec3;
use crate::rasterizer::GaussianTensors;

pub const GAT_HEADS: usize = 4;
pub const GAT_HIDDEN: usize = 64;
pub const GAT_DROPOUT: f64 = 0.1;
pub const ATTENTION_SLOPE: f64 = 0.2;
/// Bound on the per-instance translation, in scene units.
pub const TRANSLATION_BOUND: f64 = 0.05;
pub const DEGREE_THRESHOLD: usize = 1;

/// Closed axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aabb {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
}

impl Aabb {
    /// Touching boxes intersect.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.max[a] && other.min[a] <= self.max[a])
    }
}

pub fn instance_aabb<T: Real>(centers: &[Vec3<T>]) -> Result<Aabb, InteractionError> {
    let first = centers.first().ok_or(InteractionError::EmptyInstance)?;
    let mut b = Aabb {
        min: first.map(|v| v.as_f64()),
        max: first.map(|v| v.as_f64()),
    };
    for p in centers {
        for a in 0..3 {
            b.min[a] = b.min[a].min(p[a].as_f64());
            b.max[a] = b.max[a].max(p[a].as_f64());
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SceneGraph {
    /// Instance ids, one per node.
    pub nodes: Vec<u32>,
    /// Node index pairs `(i, p)` with `i < p`, in lexicographic order.
    pub edges: Vec<(usize, usize)>,
    pub degree: Vec<usize>,
}

impl SceneGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Each node's neighbours plus itself, ascending.
    pub fn neighborhoods(&self) -> Vec<Vec<usize>> {
        let mut nb: Vec<Vec<usize>> = (0..self.len()).map(|i| vec![i]).collect();
        for &(i, p) in &self.edges {
            nb[i].push(p);
            nb[p].push(i);
        }
        nb.iter_mut().for_each(|n| n.sort_unstable());
        nb
    }

    /// The per-frame JSON dump.
    pub fn to_json(&self, frame: usize, tau: usize) -> serde_json::Value {
        let active: Vec<u32> = active_instances(self, tau).into_iter().map(|i| self.nodes[i]).collect();
        serde_json::json!({
            "frame": frame,
            "nodes": self.nodes,
            "edges": self.edges.iter().map(|&(i, p)| [self.nodes[i], self.nodes[p]]).collect::<Vec<_>>(),
            "active": active,
        })
    }
}

/// Links every pair of instances whose closed boxes intersect.
pub fn build_scene_graph(ids: &[u32], boxes: &[Aabb]) -> SceneGraph {
    assert_eq!(ids.len(), boxes.len(), "one box per instance");
    let m = ids.len();
    let mut edges = Vec::new();
    let mut degree = vec![0; m];
    for i in 0..m {
        for p in i + 1..m {
            if boxes[i].intersects(&boxes[p]) {
                edges.push((i, p));
                degree[i] += 1;
                degree[p] += 1;
            }
        }
    }
    SceneGraph {
        nodes: ids.to_vec(),
        edges,
        degree,
    }
}

/// Node indices with degree at least `tau`.
pub fn active_instances(graph: &SceneGraph, tau: usize) -> Vec<usize> {
    (0..graph.len()).filter(|&i| graph.degree[i] >= tau).collect()
}

/// One multi-head attention layer.
#[derive(Debug, Clone)]
pub struct GatLayer<T: Real> {
    pub heads: usize,
    pub head_dim: usize,
    /// `[in, heads * head_dim]`.
    pub weight: Tensor<T>,
    /// `[heads, head_dim]` each.
    pub att_src: Tensor<T>,
    pub att_dst: Tensor<T>,
    pub bias: Tensor<T>,
    /// Concatenate heads (otherwise average them).
    pub concat: bool,
}

impl<T: Real> GatLayer<T> {
    pub fn new(inputs: usize, heads: usize, head_dim: usize, concat: bool, rng: &mut impl Rng) -> Self {
        let width = heads * head_dim;
        let out = if concat { width } else { head_dim };
        GatLayer {
            heads,
            head_dim,
            weight: Tensor::param(&[inputs, width], init_values(Init::GlorotUniform, inputs * width, inputs, width, rng)),
            att_src: Tensor::param(&[heads, head_dim], init_values(Init::GlorotUniform, width, head_dim, 1, rng)),
            att_dst: Tensor::param(&[heads, head_dim], init_values(Init::GlorotUniform, width, head_dim, 1, rng)),
            bias: Tensor::param(&[out], vec![T::zero(); out]),
            concat,
        }
    }

    /// `x: [M, in]`. Attention coefficients are dropped out only when `rng`
    /// is given.
    pub fn forward(&self, x: &Tensor<T>, neighborhoods: &[Vec<usize>], mut rng: Option<&mut ChaCha8Rng>) -> Tensor<T> {
        let wh = x.matmul(&self.weight);
        let slope = T::of(ATTENTION_SLOPE);
        let mut outs = Vec::with_capacity(self.heads);
        for k in 0..self.heads {
            let hk = wh.slice_cols(k * self.head_dim, (k + 1) * self.head_dim);
            let a_src = self.att_src.gather_rows(&[k]).reshape(&[self.head_dim, 1]);
            let a_dst = self.att_dst.gather_rows(&[k]).reshape(&[self.head_dim, 1]);
            let mut att = masked_attention(&hk.matmul(&a_src), &hk.matmul(&a_dst), neighborhoods, slope);
            if let Some(r) = rng.as_deref_mut() {
                att = att.dropout(GAT_DROPOUT, r, true);
            }
            outs.push(att.matmul(&hk));
        }
        let combined = if self.concat {
            Tensor::concat_cols(&outs.iter().collect::<Vec<_>>())
        } else {
            let mut sum = outs[0].clone();
            for o in &outs[1..] {
                sum = sum.add(o);
            }
            sum.scale(T::one() / T::of(self.heads as f64))
        };
        combined.add_row(&self.bias)
    }

    /// Attention coefficients of head `k` without dropout, `[M, M]`.
    pub fn attention(&self, x: &Tensor<T>, neighborhoods: &[Vec<usize>], k: usize) -> Tensor<T> {
        let hk = x.matmul(&self.weight).slice_cols(k * self.head_dim, (k + 1) * self.head_dim);
        let a_src = self.att_src.gather_rows(&[k]).reshape(&[self.head_dim, 1]);
        let a_dst = self.att_dst.gather_rows(&[k]).reshape(&[self.head_dim, 1]);
        masked_attention(&hk.matmul(&a_src), &hk.matmul(&a_dst), neighborhoods, T::of(ATTENTION_SLOPE))
    }
}

impl<T: Real> Module<T> for GatLayer<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.att_src"), self.att_src.clone()));
        out.push((format!("{prefix}.att_dst"), self.att_dst.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Two attention layers: 4 heads of 16 concatenated with ELU, then 4 heads
/// of 64 averaged.
#[derive(Debug, Clone)]
pub struct Gat<T: Real> {
    pub layers: [GatLayer<T>; 2],
}

impl<T: Real> Gat<T> {
    pub fn new(inputs: usize, rng: &mut impl Rng) -> Self {
        Gat {
            layers: [
                GatLayer::new(inputs, GAT_HEADS, GAT_HIDDEN / GAT_HEADS, true, rng),
                GatLayer::new(GAT_HIDDEN, GAT_HEADS, GAT_HIDDEN, false, rng),
            ],
        }
    }

    /// `[M, in]` node features to `[M, 64]`. Dropout is active only when a
    /// random stream is supplied.
    pub fn forward(&self, x: &Tensor<T>, graph: &SceneGraph, mut rng: Option<&mut ChaCha8Rng>) -> Tensor<T> {
        let nb = graph.neighborhoods();
        let h = self.layers[0].forward(x, &nb, rng.as_deref_mut()).elu();
        self.layers[1].forward(&h, &nb, rng)
    }
}

impl<T: Real> Module<T> for Gat<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&format!("{prefix}.layer{i}"), out);
        }
    }
}

/// Per-instance residuals from the interaction decoder.
#[derive(Debug, Clone)]
pub struct InteractionResiduals<T: Real> {
    /// `[A, 3]`, bounded by [`TRANSLATION_BOUND`].
    pub translation: Tensor<T>,
    /// `[A, 3]`, added to the degree-0 SH band.
    pub base_color: Tensor<T>,
    /// `[A, 1]`.
    pub opacity_logit: Tensor<T>,
}

/// `64 -> 64 -> 7` with a zero-initialised output layer.
#[derive(Debug, Clone)]
pub struct InteractionDecoder<T: Real> {
    pub mlp: Mlp<T>,
}

impl<T: Real> InteractionDecoder<T> {
    pub fn new(inputs: usize, rng: &mut impl Rng) -> Self {
        InteractionDecoder {
            mlp: Mlp::new(&[inputs, 64, 7], Init::Zeros, rng),
        }
    }

    pub fn decode(&self, features: &Tensor<T>) -> InteractionResiduals<T> {
        let out = self.mlp.forward(features);
        InteractionResiduals {
            translation: out.slice_cols(0, 3).tanh().scale(T::of(TRANSLATION_BOUND)),
            base_color: out.slice_cols(3, 6),
            opacity_logit: out.slice_cols(6, 7),
        }
    }
}

impl<T: Real> Module<T> for InteractionDecoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.mlp.collect_params(prefix, out);
    }
}

/// Stage-two composition. `stage1[i]` must carry the stage-zero centers.
/// `active[a]` is the instance index receiving row `a` of the residuals;
/// every other instance passes through. Rotations and scales are never
/// touched.
pub fn apply_stage2_updates<T: Real>(
    stage1: &[GaussianTensors<T>],
    residuals: &InteractionResiduals<T>,
    active: &[usize],
) -> Vec<GaussianTensors<T>> {
    let mut out = stage1.to_vec();
    for (row, &i) in active.iter().enumerate() {
        let g = &stage1[i];
        let n = g.len();
        let nc = g.sh.shape()[1];
        let shift = residuals.translation.gather_rows(&[row]).reshape(&[3]).broadcast_rows(n);
        let dc = residuals.base_color.gather_rows(&[row]).reshape(&[3]).broadcast_rows(n);
        let dc = if nc > 3 {
            Tensor::concat_cols(&[&dc, &Tensor::zeros(&[n, nc - 3])])
        } else {
            dc
        };
        let da = residuals.opacity_logit.gather_rows(&[row]).reshape(&[1]).broadcast_rows(n);
        out[i] = GaussianTensors {
            sh_degree: g.sh_degree,
            centers: g.centers.add(&shift),
            sh: g.sh.add(&dc),
            opacity_logit: g.opacity_logit.add(&da),
            rotation: g.rotation.clone(),
            log_scale: g.log_scale.clone(),
            stretch: g.stretch.clone(),
        };
    }
    out
}
