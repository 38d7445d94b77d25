//! Learning the order in which the sub-questions of a conjunctive
//! knowledge-graph question are expanded.

pub mod analysis;
pub mod embedding;
pub mod env;
pub mod error;
pub mod graph;
pub mod policy;
pub mod query;
pub mod trainer;

pub use error::{Error, Result};
