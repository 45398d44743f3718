//! Training and evaluation of the full undersample-then-reconstruct chain.
//!
//! Forward path per image: unshifted k-space, DC-centered mask (unshifted
//! before use), zero-filled inverse transform, magnitude, network. The
//! network sees the single-channel magnitude image.

mod eval;
mod metrics;
mod profile;
mod train;

pub use eval::{
    compare_methods, evaluate, evaluate_with_threads, mean_psnr, ComparisonCell, ComparisonRow,
    ComparisonTable, EvalReport, MethodArtifact,
};
pub use metrics::{format_psnr, EXACT_MSE, joint_loss, mse, psnr, undersampled_image};
pub use profile::{export_probability_profile, ProbabilityProfile};
pub use train::{
    joint_gradients, train, train_fixed_mask, train_with, write_log_csv, JointGradients, LogRow,
    MaskMode, TrainConfig, TrainOutcome, TrainState, LOG_CSV_HEADER,
};
