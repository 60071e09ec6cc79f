//! Second stage: a flow model over latent trajectories, conditioned on observed frames.

mod model;
mod train;

pub use model::{build_conditioning, ConditioningBatch, ConditioningTensor, LatentFlowConfig, LatentFlowModel, LatentLayer};
pub use train::{
    second_stage_validation_loss, train_second_stage, FreezeReport, SecondStage, SecondStageConfig,
    LatentScale, SecondStageOptions, SecondStageTraining, Stage2Sidecar,
};
