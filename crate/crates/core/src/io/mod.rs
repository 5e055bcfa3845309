//! Problem files and result files.

mod config;
mod output;

pub use config::*;
pub use output::*;
