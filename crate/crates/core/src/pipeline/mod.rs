//! Training, evaluation and ablation of the three-stage model.

pub mod loss;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;

pub use loss::{
    masked_psnr, masked_ssim, psnr, psnr_from_mse, render_loss, ssim, ssim_value, LossTerms, LossWeights,
    PerceptualLoss,
};
pub use model::{FrameOutput, FrameStages, Model, ModelConfig, StageActivity};
pub use train::{
    ablate, evaluate, objective, train, train_model, AblationEntry, AblationTable, LossRecord, MetricsReport,
    TrainOutcome, ViewMetrics,
};

/// Which refinement stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoFusion,
    NoInteraction,
    None,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoFusion, Variant::NoInteraction, Variant::None];

    pub fn uses_fusion(self) -> bool {
        matches!(self, Variant::Full | Variant::NoInteraction)
    }

    pub fn uses_interaction(self) -> bool {
        matches!(self, Variant::Full | Variant::NoFusion)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFusion => "no_fusion",
            Variant::NoInteraction => "no_interaction",
            Variant::None => "none",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown variant {s:?}")))
    }
}

/// Order in which (frame, camera) pairs are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    RoundRobin,
    /// Uniform draws from a generator seeded with the run seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub variant: Variant,
    pub sampling: Sampling,
    pub checkpoint_every: usize,
    /// Cameras excluded from training and context selection.
    pub holdout: Vec<u32>,
    /// Tile workers for the training renders. Gradients do not depend on it.
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            variant: Variant::Full,
            sampling: Sampling::RoundRobin,
            checkpoint_every: 500,
            holdout: Vec::new(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let w = &self.weights;
        if !(w.l1 >= 0.0 && w.ssim >= 0.0 && w.lpips >= 0.0) {
            return Err(PipelineError::Config("loss weights must be non-negative".into()));
        }
        if w.l1 + w.ssim <= 0.0 {
            return Err(PipelineError::Config("L1 and SSIM weights must not both be zero".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PipelineError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.checkpoint_every == 0 {
            return Err(PipelineError::Config("checkpoint interval must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            seed: self.seed,
            holdout: self.holdout.clone(),
            ..ModelConfig::default()
        }
    }
}
