//! Replay-free multi-label class-incremental learning with dual decoupled
//! prompting.
//!
//! The engine trains nothing but prompts: a pair of frozen miniature
//! transformer encoders (visual and text) stays fixed forever, while each
//! class learns four small prompt tensors — positive and negative, in both
//! modalities. An image's confidence for a class is a binary softmax over
//! the cosine similarities of the prompted text and visual embeddings, with
//! a temperature that grows as classes accumulate to compress over-confident
//! false positives. Past-task prompts are frozen after their task, which
//! makes forgetting exactly zero at the score level rather than merely small.
//!
//! Module map:
//! - [`tensor`], [`param`], [`rng`], [`graph`], [`optim`], [`gradcheck`] —
//!   dense f64 numerics, reverse-mode autodiff, Adam, and the
//!   finite-difference validation harness.
//! - [`encoder`] — frozen dual transformers, prompted attention, prefix
//!   caching.
//! - [`prompting`] — per-class prompt storage, freezing, checkpoints.
//! - [`scoring`] — similarity pairs, binary confidences, the temperature
//!   schedule, and the training loss.
//! - [`protocol`] — incremental schedules, the per-task training loop, and
//!   full-sequence orchestration.
//! - [`metrics`] — mAP/CF1/OF1/FPR and report assembly.
//! - [`datagen`] — seeded synthetic multi-label data and its file format.
//! - [`manifest`] — resolved run configuration and its content hash.

pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod prompting;
pub mod protocol;
pub mod scoring;
pub mod rng;
pub mod tensor;

pub use datagen::{generate, load_dataset, save_dataset, synth20, Dataset, SyntheticSpec};
pub use encoder::{
    init_frozen_encoder, DualEncoder, DualEncoderConfig, EncoderConfig, PrefixCache,
};
pub use error::{DdpError, Result};
pub use gradcheck::{finite_diff_check, run_battery, GradCheckResult};
pub use manifest::{PcdParams, RunManifest};
pub use metrics::{aggregate, average_precision, f1_scores, false_positive_rate, MetricsRecord, MetricsReport};
pub use prompting::{BranchMode, PromptMode, PromptSet, PromptStore};
pub use protocol::{
    build_schedule, evaluate, evaluate_uncached, joint_upper_bound, run_sequence, train_task,
    DataSource, EvalOutcome, RunOutput, RunState, TaskSchedule, TrainConfig,
};
pub use scoring::{binary_confidence, pcd_tau, PcdSchedule, PredictionMatrix, ScorePair};
pub use param::Parameter;
pub use rng::Rng;
pub use tensor::Tensor;
