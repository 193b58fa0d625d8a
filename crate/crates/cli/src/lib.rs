//! Command-line front end: configuration, the `synth`, `train`, `eval`,
//! `gradcheck` and `attn-export` commands, and their exit codes.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    build_spec, gradcheck_variant, noise_sweep, read_data, run_training, synthesize, write_data, NoisePoint, SplitData,
};
pub use config::RunConfig;
pub use error::CliError;
