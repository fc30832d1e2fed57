//! Project store, pipeline stages, command-line tool and HTTP service built on
//! `placekit-core`.

pub mod api;
pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod project;

pub use error::{PipelineError, Result};
