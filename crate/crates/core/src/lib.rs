//! Knowledge-subgraph partitioning, graph-augmented ranking of sub-KSGs and
//! answer selection over a triple store.

pub mod answer_select;
pub mod biggnn;
pub mod ebimpm;
pub mod error;
pub mod evalmetrics;
pub mod kg_store;
pub mod numerics;
pub mod partition;
pub mod pipeline;
pub mod ranker;
pub mod synthetic;
pub mod text_pipeline;
pub mod verify;

pub use error::{Error, Result};
