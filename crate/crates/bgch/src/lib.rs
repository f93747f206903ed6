//! Pipeline binary around the hashing core: file formats, config plumbing,
//! experiment drivers, validators, and the `bgch` CLI itself.
//!
//! The numeric layer lives in `bgch-core`; this crate owns everything that
//! touches the filesystem, clocks, or threads.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod manifest;
pub mod runner;
pub mod validate;

pub use error::{Error, Result};

/// Initializes stderr logging from the `BGCH_LOG` env var (error, info, or
/// debug); defaults to info.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("BGCH_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
