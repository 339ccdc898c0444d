pub mod bench;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod niah;
pub mod retrieval;
pub mod rope;
pub mod sft;
pub mod task;
pub mod tokenize;

pub use error::{Error, Result};
