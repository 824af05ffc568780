//! Command implementations behind the `fedtree` binary: config loading,
//! experiment runs, parameter sweeps, the verification battery and the
//! on-disk artifacts they produce.

pub mod artifacts;
pub mod check;
pub mod error;
pub mod run;
pub mod sweep;
pub mod threads;

pub use error::CliError;
pub use run::{cmd_run, parse_config};

/// Clamp `λ` after every step, or leave it unprojected for the mutation check.
pub fn lora_projection(clamp: bool) -> fedtree_core::lora::LambdaProjection {
    if clamp {
        fedtree_core::lora::LambdaProjection::Clamp
    } else {
        fedtree_core::lora::LambdaProjection::Unprojected
    }
}
