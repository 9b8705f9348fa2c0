//! Cross-seed aggregation of finished runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{Manifest, RunStatus};
use super::output::write_atomic;
use super::MetricsRow;
use crate::error::SimError;

pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const RESPONSE_AGGREGATE_CSV: &str = "response_aggregate.csv";
pub const REPORT_JSON: &str = "analysis.json";

/// Mean and standard error of the mean (sample standard deviation over `sqrt(n)`).
/// A single value has standard error 0.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub condition: String,
    pub schedule: String,
    pub bias: String,
    pub rewiring_learning: bool,
    pub bin: u64,
    pub episodes: u64,
    pub n_seeds: usize,
    pub mutual_coop_mean: f64,
    pub mutual_coop_se: f64,
    pub connection_rate_mean: f64,
    pub connection_rate_se: f64,
    pub coop_rate_a0_mean: f64,
    pub coop_rate_a0_se: f64,
    pub coop_rate_a1_mean: f64,
    pub coop_rate_a1_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub run_id: String,
    pub agent: usize,
    pub other_prev_action: String,
    pub connect_fraction: Option<f64>,
    pub n_samples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseAggregateRow {
    pub condition: String,
    pub schedule: String,
    pub bias: String,
    pub rewiring_learning: bool,
    pub agent: usize,
    pub other_prev_action: String,
    pub connect_fraction_mean: Option<f64>,
    pub connect_fraction_se: Option<f64>,
    /// Seeds in which the cell occurred.
    pub n_seeds: usize,
    pub n_samples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRun {
    pub run_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub runs_used: usize,
    pub excluded: Vec<ExcludedRun>,
    #[serde(skip)]
    pub aggregate: Vec<AggregateRow>,
    #[serde(skip)]
    pub responses: Vec<ResponseAggregateRow>,
}

struct RunData {
    schedule: String,
    bias: String,
    rewiring_learning: bool,
    rows: Vec<MetricsRow>,
    responses: Vec<ResponseRow>,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| e.to_string())
}

/// Aggregate every successful run in `results_dir` (which must hold a manifest)
/// and write the CSV tables and a JSON report into `out_dir`.
pub fn analyze(results_dir: &Path, out_dir: &Path) -> Result<AnalysisReport, SimError> {
    let manifest = Manifest::read(results_dir)?;
    let mut excluded = Vec::new();
    let mut groups: BTreeMap<String, Vec<RunData>> = BTreeMap::new();

    for entry in &manifest.runs {
        if entry.status != RunStatus::Ok {
            excluded.push(ExcludedRun {
                run_id: entry.run_id.clone(),
                reason: format!("run failed: {}", entry.error.clone().unwrap_or_default()),
            });
            continue;
        }
        let loaded = read_csv::<MetricsRow>(&results_dir.join(&entry.metrics))
            .map_err(|e| format!("metrics: {e}"))
            .and_then(|rows| {
                if rows.is_empty() {
                    return Err("metrics: no rows".to_string());
                }
                let responses = read_csv::<ResponseRow>(&results_dir.join(&entry.response))
                    .map_err(|e| format!("response: {e}"))?;
                Ok((rows, responses))
            });
        match loaded {
            Ok((rows, responses)) => groups.entry(entry.condition.clone()).or_default().push(RunData {
                schedule: entry.schedule.as_str().to_string(),
                bias: entry.bias.as_str().to_string(),
                rewiring_learning: entry.rewiring_learning,
                rows,
                responses,
            }),
            Err(reason) => excluded.push(ExcludedRun { run_id: entry.run_id.clone(), reason }),
        }
    }

    let mut aggregate = Vec::new();
    let mut responses = Vec::new();
    let mut runs_used = 0;
    for (condition, runs) in &groups {
        runs_used += runs.len();
        let first = &runs[0];
        let bins = runs.iter().map(|r| r.rows.len()).max().unwrap_or(0);
        for bin in 0..bins {
            let rows: Vec<&MetricsRow> = runs.iter().filter_map(|r| r.rows.get(bin)).collect();
            let stat = |f: fn(&MetricsRow) -> f64| mean_se(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mc, mc_se) = stat(|r| r.mutual_coop_rate);
            let (cr, cr_se) = stat(|r| r.connection_rate);
            let (c0, c0_se) = stat(|r| r.coop_rate_a0);
            let (c1, c1_se) = stat(|r| r.coop_rate_a1);
            aggregate.push(AggregateRow {
                condition: condition.clone(),
                schedule: first.schedule.clone(),
                bias: first.bias.clone(),
                rewiring_learning: first.rewiring_learning,
                bin: bin as u64,
                episodes: rows[0].episodes,
                n_seeds: rows.len(),
                mutual_coop_mean: mc,
                mutual_coop_se: mc_se,
                connection_rate_mean: cr,
                connection_rate_se: cr_se,
                coop_rate_a0_mean: c0,
                coop_rate_a0_se: c0_se,
                coop_rate_a1_mean: c1,
                coop_rate_a1_se: c1_se,
            });
        }

        for agent in 0..2 {
            for action in ["cooperate", "defect"] {
                let cells: Vec<&ResponseRow> = runs
                    .iter()
                    .flat_map(|r| r.responses.iter())
                    .filter(|r| r.agent == agent && r.other_prev_action == action)
                    .collect();
                let fractions: Vec<f64> = cells.iter().filter_map(|c| c.connect_fraction).collect();
                let (mean, se) = if fractions.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_se(&fractions);
                    (Some(m), Some(s))
                };
                responses.push(ResponseAggregateRow {
                    condition: condition.clone(),
                    schedule: first.schedule.clone(),
                    bias: first.bias.clone(),
                    rewiring_learning: first.rewiring_learning,
                    agent,
                    other_prev_action: action.to_string(),
                    connect_fraction_mean: mean,
                    connect_fraction_se: se,
                    n_seeds: fractions.len(),
                    n_samples: cells.iter().map(|c| c.n_samples).sum(),
                });
            }
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| SimError::io(out_dir, e))?;
    write_atomic(&out_dir.join(AGGREGATE_CSV), &to_csv(&aggregate, &out_dir.join(AGGREGATE_CSV))?)?;
    write_atomic(
        &out_dir.join(RESPONSE_AGGREGATE_CSV),
        &to_csv(&responses, &out_dir.join(RESPONSE_AGGREGATE_CSV))?,
    )?;
    let report = AnalysisReport { runs_used, excluded, aggregate, responses };
    write_atomic(&out_dir.join(REPORT_JSON), &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

fn to_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<Vec<u8>, SimError> {
    let fmt = |e: &dyn std::fmt::Display| SimError::Format { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| fmt(&e))?;
    }
    w.into_inner().map_err(|e| fmt(&e.into_error()))
}
