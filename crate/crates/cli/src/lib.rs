//! Command implementations behind the `ml2` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_embed, cmd_eval, cmd_gen_data, cmd_project, cmd_train, DataArgs, EvalArgs};
pub use config::RunConfig;
pub use error::CliError;

/// Environment variable naming the parent of default run directories.
pub const RUN_DIR_ENV: &str = "ML2_RUN_DIR";
