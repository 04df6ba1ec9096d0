pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
