//! File formats, dataset tooling, training/evaluation drivers and the `umbra`
//! command line on top of [`umbra_core`].

pub mod archive;
pub mod cli;
pub mod dataset;
pub mod dissociate;
pub mod error;
pub mod evaluate;
pub mod infer;
pub mod io;
pub mod train;

pub use error::{Error, Result};
pub use umbra_core as core;
