pub mod config;
pub mod dcor;
pub mod blackbox;
pub mod eft;
pub mod error;
pub mod experiment;
pub mod ica;
pub mod mixer;
pub mod net;
pub mod pool;
pub mod report;
pub mod select;
pub mod source;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
