pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod finetune;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reranker;
pub mod text;
pub mod toy;

pub use error::{Error, Result};
