//! Config-driven experiment runner for `conmatch-core`.

pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::RunConfig;
pub use error::CliError;
