pub mod corpus;
pub mod episodes;
pub mod error;
pub mod seed;

pub use error::{Error, Result};
pub mod encoder;
pub mod pretrain;
pub mod span;
pub mod proto;
pub mod model;
pub mod train;
pub mod eval;
