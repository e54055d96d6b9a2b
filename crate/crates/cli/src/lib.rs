//! Configuration-driven experiment runner around `subnet_core`.

pub mod commands;
pub mod config;

pub use commands::run;
pub use config::{parse_config, parse_config_str, Command, RunConfig};
