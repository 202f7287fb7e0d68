//! Toy rectified-flow video diffusion transformer with the camera-control
//! branch: noise schedules, conditioning gates, separate text/camera
//! classifier-free guidance, two-phase training, and a deterministic Euler
//! sampler.

mod checkpoint;
mod config;
mod model;
mod sample;
mod tape;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{
    parse_config, sample_noise_level, write_config, BatchSample, ConditioningGate, FeedbackMode,
    GuidanceWeights, ModelConfig, NoiseSchedule,
};
pub use model::{
    compressed_frames, encode_camera, forward, rope_tables, BoundModel, ForwardInput,
    ForwardResult, ModelState, Param, TokenGrid, CAM_ENCODER_CHANNELS,
};
pub use sample::{combine_guidance, guided_velocity, sample, SampleOptions, SampleOutput};
pub use tape::{Gradients, Tape, VarId};
pub use train::{
    loss_log_csv, rectified_flow_loss, train, LossConfig, LossRow, TrainOptions, TrainPhase,
    CONDITION_DROPOUT,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("non-finite loss at step {step}; state restored to step {restored_step}")]
    NonFiniteLoss { step: usize, restored_step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] crate::tensorio::TensorIoError),
}
