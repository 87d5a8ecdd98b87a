pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod domain;
pub mod io;
pub mod rng;
pub mod checkpoint;
pub mod networks;
pub mod losses;
pub mod datapipe;
pub mod training;
pub mod inference;
pub mod baselines;
pub mod evaluation;
