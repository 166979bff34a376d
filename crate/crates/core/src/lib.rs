pub mod asr;
pub mod audio;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lip;
pub mod lm;
pub mod pipeline;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
