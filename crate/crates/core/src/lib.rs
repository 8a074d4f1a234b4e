pub mod asyncsim;
pub mod diffnet;
pub mod env;
pub mod error;
pub mod evalanal;
pub mod experiment;
pub mod flowpolicy;
pub mod pairgen;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
