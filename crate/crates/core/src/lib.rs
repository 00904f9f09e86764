//! Rehearsal-based class-incremental learning at desk scale.
//!
//! The crate bundles a small differentiable MLP ([`netcore`]), class-incremental
//! task streams ([`streams`]), a class-balanced replay memory ([`buffer`]), the
//! prediction-space and parameter-space regularizers ([`regularizers`]), the
//! ER / DER / DER++ training loops ([`methods`]), the ACC / FR evaluation
//! metrics ([`metrics`]) and a grid runner that turns a declarative config into
//! result tables ([`harness`]).

// `!(x >= 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod error;
pub mod harness;
pub mod methods;
pub mod metrics;
pub mod netcore;
pub mod regularizers;
pub mod rng;
pub mod streams;

pub use buffer::{BufferEntry, InsertAt, ReplayBuffer, ReplayUnavailable};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ResultRecord};
pub use methods::{Learner, LossBreakdown, Method, MethodKind, TrainConfig};
pub use metrics::{compute_acc, compute_fr, AccuracyMatrix};
pub use netcore::{DenseMatrix, ForwardCache, GradientSet, MlpParams, PredictionBatch};
pub use regularizers::{EwcState, RegTarget, Regularizer, RegularizerKind, SiState};
pub use streams::{Dataset, Sample, TaskSpec, TaskStream};
