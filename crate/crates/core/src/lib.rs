//! Multi-task deep metric learning on fixed feature vectors: one shared
//! encoder, four embedding heads trained on complementary triplet and
//! contrastive tasks, adversarial decorrelation between heads, and the
//! retrieval metrics to judge the result.
//!
//! Start from [`trainer::fit`] or the `diva` binary; `examples/` has one
//! runnable program per component.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod mining;
pub mod model;
pub mod objectives;
pub mod queue;
pub mod tensor;
pub mod eval;
pub mod trainer;
