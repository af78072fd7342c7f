//! Dataset files and run configuration.

mod config;
mod dataset;

pub use config::{
    load_config, parse_config, save_config, ConfigError, IntegratorConfig, MemeticConfig,
    OutputConfig, RunConfig, TreeConfig,
};
pub use dataset::{load_dataset, parse_dataset, write_dataset, DataError, Dataset, Row, HEADER};
