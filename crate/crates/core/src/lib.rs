pub mod community;
pub mod engine;
pub mod error;
pub mod eval;
pub mod generate;
pub mod graph;
pub mod index;
pub mod ingest;
pub mod llm;
pub mod planner;
pub mod rerank;
pub mod retrieval;
pub mod store;
pub mod text;

pub use error::{Error, Result};
