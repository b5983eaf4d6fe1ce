//! Command-line front end for the vitmerge toolkit.
//!
//! The library half holds everything the binary does: config parsing,
//! artifact file formats, stage orchestration and report building. The
//! binary in `main.rs` is a thin clap wrapper over [`pipeline`], which
//! keeps every stage callable from tests.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
mod error;
pub mod pipeline;
pub mod report;
pub(crate) mod wire;

pub use error::{Error, Result};
