pub mod autograd;
pub mod data;
pub mod clustering;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
