//! File formats, dataset ingestion, configuration and the command line for
//! [`glass_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod files;
pub mod glft;
pub mod imageio;
pub mod report;
pub mod workflow;

pub use error::{Error, Result};
