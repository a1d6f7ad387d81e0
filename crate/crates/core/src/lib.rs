//! STNet crowd counting at desk scale: a small f64 autodiff engine, the
//! scale-tree enhancer, the full counting network with its auxiliator,
//! the three-term objective, synthetic data, and analysis tooling.

mod error;

pub mod analysis;
pub mod data;
pub mod model;
pub mod scale_tree;
pub mod supervision;
pub mod tensor;

pub use error::{Error, Result};
