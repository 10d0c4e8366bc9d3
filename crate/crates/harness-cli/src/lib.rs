//! Training, evaluation and synthesis harness around the codec and the
//! language models, plus the persistence formats the CLI reads and writes.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod tokenfile;
pub mod toy;

pub use error::{HarnessError, Result};
