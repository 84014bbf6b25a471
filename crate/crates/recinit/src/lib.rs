//! File formats, experiment configs and the command-line driver around
//! `recinit-core`.

pub mod artifacts;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod lab;
pub mod report;

pub use error::{Error, Result};
