//! File formats, the training driver and the command-line front end for
//! `sparseview-core`.

pub mod commands;
pub mod error;
pub mod io;
pub mod report;

pub use error::{Error, Result};
