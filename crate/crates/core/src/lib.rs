//! Multi-stem token language modelling: per-stem RVQ tokenizers, a partial
//! delay pattern over parallel streams, masked-prefix stem editing,
//! constrained decoding and objective editing metrics.

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch;
// index loops walk several parallel stream arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod delay;
pub mod edit;
pub mod error;
pub mod evaluate;
pub mod format;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rvq;
pub mod sampler;
pub mod synth;
pub mod train;

pub use dataset::{Dataset, Split};
pub use delay::{apply_delay, remove_delay, DelayedGrid};
pub use edit::{EditPlan, ModelSequence, StemMask};
pub use error::{Error, Result};
pub use evaluate::{evaluate_task, EvalOptions, Task, TaskReport};
pub use layout::{
    make_layout, stream_index, validate_grid, DelayRule, LayoutSpec, Special, StemSpec, Token, TokenGrid,
};
pub use model::{Condition, DType, Model, ModelCheckpoint, ModelConfig};
pub use rvq::{CodebookSet, FrameSequence};
pub use sampler::{DecodeParams, EditMode};
pub use train::TrainConfig;
