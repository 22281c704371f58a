//! Self-guided denoising learning for implicit-feedback recommenders.
//!
//! Training runs in two phases. Phase I trains a factorization scorer
//! normally while tracking which interactions the model has memorized
//! (hit-ratio bits over a sliding window) and estimating the noise rate from
//! the loss distribution; it stops at the memorization point, freezing the
//! memorized set. Phase II trains on, but every sample loss is scaled by a
//! learned weighting network whose parameters are updated from the gradient
//! agreement between training samples and memorized samples, with an
//! adaptive scheduler choosing which memorized samples provide guidance.
//!
//! The crate exposes each stage as a library module plus an orchestration
//! [`harness`] behind a flat key-value configuration.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod harness;
pub mod memorization;
pub mod metaweight;
pub mod model;
pub mod rng;
pub mod scheduler;

pub use dataset::{InteractionTable, Interaction, RawRating, Split, SplitSets, SyntheticConfig};
pub use error::{Error, Result};
pub use eval::{EvalSplit, MetricReport};
pub use harness::{RunArtifacts, RunConfig, TrainMode};
pub use memorization::{GmmFit, MemTracker, MpMrReport};
pub use metaweight::{AssumedParams, MetaStepReport, WeightNet};
pub use model::{Coord, ModelParams, ParamBlock, SampleKind, SparseGrad, TrainSample};
pub use scheduler::{GumbelDraw, SchedFeatures, SchedulerState, SchedulerVariant};
