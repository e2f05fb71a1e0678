//! Feature-augmented knowledge distillation for dense prediction.
//!
//! The crate provides pixel-wise (PD) and channel-wise (CWD) distillation
//! losses, their closed-form upper bounds under infinitely many Gaussian
//! feature augmentations (AUG_PD, AUG_CWD), streaming per-class covariance
//! estimates that drive those augmentations, Monte Carlo oracles that check
//! the bounds, and a small teacher/student harness on synthetic pixel data.

pub mod campaign;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod stats;

pub use error::{Error, Result};
pub use losses::{
    aug_cwd_loss, aug_pd_loss, cwd_loss, distill_loss, pd_loss, segmentation_ce_loss, ClassifierHead,
    CwdBoundForm, DiagonalMode, DistillLossSpec, FeatureBatch, LossOutput, LossVariant, VarianceDenominator,
};
pub use numerics::{log_sum_exp, sample_mvn, softmax, Mat, Rng};
pub use stats::{lambda_schedule, ClassCovarianceStore, CovarianceMode, LambdaSchedule, RampShape, IGNORE_LABEL};
pub use config::{ExperimentConfig, StudentVariant};
pub use harness::{per_class_improvement_report, run_experiment, ResultRow};
pub use metrics::{evaluate, EvalResult};
pub use model::{ExtractorSpec, PixelNet, SgdOptimizer};
