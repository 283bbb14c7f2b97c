//! Building and scoring "more universal" feature representations.
//!
//! The crate is organised as a pipeline:
//!
//! - [`hierarchy`]: category DAG with descendant / ancestor / LCA queries,
//!   partitioning and relabeling against a level set.
//! - [`spv`]: source-problem variation (semantic, random and clustering
//!   grouping, splitting, adding) and its validity check.
//! - [`synthdata`]: deterministic hierarchy-aligned synthetic source and
//!   target problems.
//! - [`nnet`]: dense feed-forward network, manual backprop, SGD with two
//!   learning-rate groups.
//! - [`retrain`]: frozen / uniform / focused self fine-tuning and its
//!   dimensionality-reduction variant.
//! - [`muldip`]: one network per source problem, fused by per-branch
//!   normalization and concatenation.
//! - [`transfer`]: frozen-feature evaluation with one-vs-all linear SVMs.
//! - [`metrics`]: universality aggregation (Avg, RG, VDC, BC, aNRG, mNRG)
//!   and the metric criteria checks.
//! - [`experiment`]: in-memory end-to-end comparison of the methods above.

pub mod experiment;
pub mod hierarchy;
pub mod metrics;
pub mod muldip;
pub mod nnet;
pub mod retrain;
pub mod rng;
pub mod spv;
pub mod synthdata;
pub mod transfer;

pub use hierarchy::{CategoryId, Hierarchy, LevelKind, LevelSet};
pub use metrics::ScoreTable;
pub use muldip::MulDipNet;
pub use nnet::{Architecture, Network, TrainConfig};
pub use spv::{GroupingMap, SourceProblem};
pub use transfer::TargetProblem;
