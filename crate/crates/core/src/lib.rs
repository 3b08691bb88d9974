pub mod adapt;
pub mod analysis;
pub mod cloud;
pub mod config;
pub mod corruptions;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod purge;
pub mod report;
pub mod seed;
pub mod tokenizer;

pub use error::{Error, Result};
