pub mod attention;
pub mod cell;
pub mod checks;
pub mod error;
pub mod gpb;
pub mod harness;
pub mod supergraph;
pub mod tensor;

pub use error::{Error, Result};
