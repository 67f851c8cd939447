//! Command line and HTTP front end over the pipeline engine. Both route
//! to the same engine calls in [`ops`] and `dikw_core`.

pub mod api;
pub mod cli;
pub mod error;
pub mod ops;

pub use error::{ApiError, ErrorCode};
