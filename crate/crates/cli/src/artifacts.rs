//! On-disk outputs of a run: metrics.csv, schedule.json, tree.json,
//! report.json and a manifest tying them together.

use std::fs;
use std::path::{Path, PathBuf};

use fedtree_core::{DepthSchedule, ExperimentReport, FederationConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SCHEDULE_FILE: &str = "schedule.json";
pub const TREE_FILE: &str = "tree.json";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const METRICS_HEADER: [&str; 5] = ["round", "client_id", "train_loss", "test_loss", "mean_lambda"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub metrics: PathBuf,
    pub schedule: PathBuf,
    pub tree: PathBuf,
    pub report: PathBuf,
}

/// What a finished run wrote and how long it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: FederationConfig,
    pub out_dir: PathBuf,
    pub artifacts: ArtifactPaths,
    pub duration_secs: f64,
}

/// schedule.json: counts, one cluster id per client for every layer, and
/// the winning scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub counts: Vec<usize>,
    pub partitions: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
    pub first_split_layer: Option<usize>,
}

impl From<&DepthSchedule> for ScheduleFile {
    fn from(s: &DepthSchedule) -> Self {
        ScheduleFile {
            counts: s.counts.clone(),
            partitions: s.partitions.iter().map(|p| p.assignment().to_vec()).collect(),
            scores: s.scores.clone(),
            first_split_layer: s.first_split_layer(),
        }
    }
}

/// One row per (round, client).
pub fn metrics_csv(report: &ExperimentReport) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::io(METRICS_FILE, e);
    w.write_record(METRICS_HEADER).map_err(fail)?;
    for r in &report.rounds {
        for (k, lambdas) in r.lambdas.iter().enumerate() {
            let mean_lambda = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
            w.write_record([
                r.round.to_string(),
                k.to_string(),
                r.train_loss[k].to_string(),
                r.test_loss[k].to_string(),
                mean_lambda.to_string(),
            ])
            .map_err(fail)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(METRICS_FILE, e))?;
    Ok(String::from_utf8(bytes).expect("csv of ascii fields"))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path.display(), e))
}

/// Writes the four run artifacts into `out`, creating it if needed.
pub fn write_run(out: &Path, report: &ExperimentReport) -> Result<ArtifactPaths, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out.display(), e))?;
    let paths = ArtifactPaths {
        metrics: out.join(METRICS_FILE),
        schedule: out.join(SCHEDULE_FILE),
        tree: out.join(TREE_FILE),
        report: out.join(REPORT_FILE),
    };
    write(&paths.metrics, &metrics_csv(report)?)?;
    write(&paths.schedule, &to_json(&ScheduleFile::from(&report.schedule)))?;
    write(&paths.tree, &to_json(&report.tree))?;
    write(&paths.report, &to_json(report))?;
    Ok(paths)
}

pub fn write_manifest(manifest: &RunManifest) -> Result<PathBuf, CliError> {
    let path = manifest.out_dir.join(MANIFEST_FILE);
    write(&path, &to_json(manifest))?;
    Ok(path)
}
