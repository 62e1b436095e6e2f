pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod lexicon;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
