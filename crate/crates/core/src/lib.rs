//! Pipelined entity and relation extraction: a span classifier, a relation
//! classifier over typed entity markers, and a batched marker approximation
//! that shares text-token computation across candidate pairs.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod entity;
pub mod error;
pub mod equivalence;
pub mod eval;
pub mod labels;
pub mod pipeline;
pub mod relation;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
