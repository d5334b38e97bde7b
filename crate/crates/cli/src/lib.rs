//! Command-line driver: config files, subcommands and exit categories.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

pub use commands::{dispatch, Command, Format, VERSION};
pub use config::{emit, parse_str, ConfigError, RunConfig};
pub use error::{Category, CliError};

/// Environment variable that replaces `output_dir` from the config.
pub const OUTPUT_DIR_ENV: &str = "LFAM_OUTPUT_DIR";

/// Builds the effective config. Precedence, lowest first: defaults, config
/// file, `--set` overrides, the output-directory environment variable, the
/// `--output` flag.
pub fn resolve_config(
    config_path: Option<&Path>,
    overrides: &[String],
    env_output: Option<PathBuf>,
    flag_output: Option<PathBuf>,
) -> Result<RunConfig, CliError> {
    let base = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
            parse_str(&text).map_err(|e| CliError::new(Category::Config, format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let mut cfg = config::apply_overrides(base, overrides)?;
    if let Some(dir) = env_output.filter(|d| !d.as_os_str().is_empty()) {
        cfg.output_dir = dir;
    }
    if let Some(dir) = flag_output {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}
