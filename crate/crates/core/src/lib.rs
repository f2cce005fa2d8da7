//! Intent-aware graph collaborative filtering on a LightGCN backbone.
//!
//! The pipeline: [`dataset`] loading and splitting, the normalized bipartite
//! [`graph`], noisy LightGCN propagation in [`backbone`], intent targets and
//! prototypes in [`intents`], every loss with hand-derived gradients in
//! [`objectives`], sparse Adam and gradient checking in [`optim`], full-ranking
//! metrics in [`eval`], and the epoch loop, checkpoints and logs in [`trainer`].

// `!(x > 0.0)` also rejects NaN, which is the point of every such check here
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod intents;
pub mod objectives;
pub mod optim;
pub mod trainer;

pub use backbone::{EmbeddingTable, ForwardTrace, Hyperparameters};
pub use dataset::{DatasetSplit, IdMap, InteractionDataset};
pub use error::{Error, Result};
pub use eval::{MetricReport, Phase};
pub use graph::NormalizedAdjacency;
pub use intents::{Assignment, Centroids, TargetSet};
pub use objectives::{Batch, GradBuffer, LossBreakdown};
pub use optim::AdamState;
pub use trainer::{Checkpoint, TrainConfig};
