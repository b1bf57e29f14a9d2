//! Decision trees, random forests and gradient boosting trained over
//! normalized multi-table data by aggregate message passing, without
//! materializing the join.

pub mod baseline;
pub mod boosting;
pub mod config;
pub mod cuboid;
pub mod database;
pub mod engine;
pub mod error;
pub mod forest;
pub mod joingraph;
pub mod messages;
pub mod model;
pub mod model_io;
pub mod predicate;
pub mod relstore;
pub mod scheduler;
pub mod semiring;
pub mod synth;
pub mod tree;

pub use boosting::{train_gbm, GbmParams, GbmReport, IterationReport};
pub use config::{load_dataset, Dataset, DatasetConfig};
pub use database::{AttrRef, Database};
pub use error::{Error, Result};
pub use forest::{train_random_forest, ForestParams, SampleSpec};
pub use joingraph::{Cardinality, JoinEdge, JoinGraph};
pub use model::{EnsembleModel, ModelKind, SchemaKind, Task};
pub use model_io::{load, predict_batch, save, SavedModel};
pub use relstore::{Column, ColumnDecl, ColumnKind, Datum, Relation};
pub use semiring::{ClassCriterion, Objective, SemiRing};
pub use tree::{train_decision_tree, Criterion, TrainInput, TreeModel, TreeParams};
