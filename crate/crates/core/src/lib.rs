//! From-scratch deep-learning engine for retinal OCT screening.

pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Graph, NodeId, Tensor};
