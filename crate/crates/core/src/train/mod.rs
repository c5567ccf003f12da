//! Training loops, evaluation, persistence, and the gradient-check suite.

pub mod checkpoint;
pub mod classify;
pub mod config;
pub mod diffusion;
pub mod gradcheck;
pub mod metrics;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use classify::{
    build_encoders, encoder_predictions, encoders_checkpoint, encoders_from_checkpoint, evaluate_classification,
    evaluation_row, select_shots, sweep_alpha, sweep_lambda, train_encoders, triplet_margins, EncoderTraining,
};
pub use config::{DiffusionTrainConfig, TrainConfig, TrainMode};
pub use diffusion::{
    diffusion_checkpoint, diffusion_from_checkpoint, guidance_eval, init_denoiser, sample_prompt, train_diffusion,
    DiffusionTraining, GuidanceReport, GuidanceRow, Prompt, SampleRow,
};
pub use gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
pub use metrics::MetricsRow;
