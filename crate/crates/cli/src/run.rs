use std::fs;
use std::path::Path;
use std::time::Instant;

use fedtree_core::{run_experiment, FederationConfig, RunStatus};

use crate::artifacts::{write_manifest, write_run, RunManifest};
use crate::error::CliError;

/// Reads and strictly parses a JSON config file.
pub fn parse_config(path: &Path) -> Result<FederationConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(FederationConfig::from_json_str(&text)?)
}

/// Runs one experiment and writes its artifacts. An aborted run still
/// writes its partial report before reporting the numeric failure.
pub fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> Result<RunManifest, CliError> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let started = Instant::now();
    let report = run_experiment(&cfg)?;
    let artifacts = write_run(out, &report)?;
    let manifest = RunManifest {
        config: cfg,
        out_dir: out.to_path_buf(),
        artifacts,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest)?;
    match report.status {
        RunStatus::Completed => Ok(manifest),
        RunStatus::Aborted { round, reason } => {
            Err(CliError::Numeric(format!("run aborted in round {round}: {reason}")))
        }
    }
}
