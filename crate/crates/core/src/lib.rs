pub mod error;
pub mod corpus;
pub mod hexgrid;
pub mod tensor;
pub mod model;
pub mod decode;
pub mod eval;
pub mod hiermap;
pub mod synthetic;

pub use error::{Error, Result};
