pub mod checkpoint;
pub mod cli;
pub mod components;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod losses;
pub mod network;
pub mod optim;
pub mod patching;
pub mod phantom;
pub mod reference;
pub mod report;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
