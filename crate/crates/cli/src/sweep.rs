//! One run per value of a single parameter, summarised in summary.csv.

use std::fs;
use std::path::Path;

use fedtree_core::{run_experiment, FederationConfig, RunStatus};

use crate::artifacts::write_run;
use crate::error::CliError;
use crate::run::parse_config;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const PARAMS: [&str; 5] = ["tau", "K", "eta", "E", "divergence_scale"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub final_mean_test_loss: Option<f64>,
    pub first_split_layer: Option<usize>,
    pub final_count: usize,
    pub completed: bool,
}

/// Splits a comma list, rejecting empty lists and empty items.
pub fn parse_values(list: &str) -> Result<Vec<String>, CliError> {
    let values: Vec<String> = list.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().all(String::is_empty) {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    if values.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("empty entry in value list {list:?}")));
    }
    Ok(values)
}

/// `base` with `param` set to `value`, validated.
pub fn apply_param(base: &FederationConfig, param: &str, value: &str) -> Result<FederationConfig, CliError> {
    let real = || {
        value
            .parse::<f64>()
            .map_err(|_| CliError::Config(format!("{param}: {value:?} is not a number")))
    };
    let count = || {
        value
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("{param}: {value:?} is not a non-negative integer")))
    };
    let mut cfg = base.clone();
    match param {
        "tau" => cfg.tau = real()?,
        "K" => cfg.window = count()?,
        "eta" => cfg.eta = real()?,
        "E" => cfg.local_epochs = count()?,
        "divergence_scale" => cfg.data.divergence_scale = real()?,
        other => {
            return Err(CliError::Config(format!(
                "unknown sweep parameter {other:?}; expected one of {}",
                PARAMS.join(", ")
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary_csv(param: &str, rows: &[SweepRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::io(SUMMARY_FILE, e);
    w.write_record([
        "param",
        "value",
        "final_mean_test_loss",
        "first_split_layer",
        "final_count",
        "status",
    ])
    .map_err(fail)?;
    for r in rows {
        w.write_record([
            param.to_string(),
            r.value.clone(),
            r.final_mean_test_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.first_split_layer.map(|v| v.to_string()).unwrap_or_default(),
            r.final_count.to_string(),
            if r.completed { "completed" } else { "aborted" }.to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(SUMMARY_FILE, e))?;
    Ok(String::from_utf8(bytes).expect("csv of ascii fields"))
}

/// Every value shares the base config's seed. Each run's artifacts go to
/// `out/<param>=<value>/`. Aborted runs are kept in the summary and turn
/// the overall result into a numeric failure.
pub fn cmd_sweep(config: &Path, param: &str, values: &str, out: &Path) -> Result<Vec<SweepRow>, CliError> {
    let base = parse_config(config)?;
    let values = parse_values(values)?;
    let configs = values
        .iter()
        .map(|v| apply_param(&base, param, v))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out.display(), e))?;

    let mut rows = Vec::with_capacity(configs.len());
    for (value, cfg) in values.iter().zip(&configs) {
        let report = run_experiment(cfg)?;
        write_run(&out.join(format!("{param}={value}")), &report)?;
        rows.push(SweepRow {
            value: value.clone(),
            final_mean_test_loss: report.final_mean_test_loss(),
            first_split_layer: report.schedule.first_split_layer(),
            final_count: *report.schedule.counts.last().expect("at least one layer"),
            completed: report.status == RunStatus::Completed,
        });
    }
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, summary_csv(param, &rows)?).map_err(|e| CliError::io(path.display(), e))?;
    if let Some(bad) = rows.iter().find(|r| !r.completed) {
        return Err(CliError::Numeric(format!("run with {param}={} aborted", bad.value)));
    }
    Ok(rows)
}
