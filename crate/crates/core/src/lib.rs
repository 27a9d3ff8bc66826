//! Training, regularization, quantization, pruning and crossbar fault
//! simulation for small convolutional classifiers mapped onto differential
//! memristor crossbars.

pub mod checkpoint;
pub mod crossbar;
pub mod data;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod quantizer;
pub mod regularizers;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
