use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{run_single_with, MetricsRow, RunConfig, RunSummary, Simulation};
use crate::env::InteractionAction;
use crate::error::SimError;

/// Destination for metrics rows as a run produces them.
pub trait MetricsSink {
    fn write_row(&mut self, row: &MetricsRow) -> io::Result<()>;

    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<MetricsRow> {
    fn write_row(&mut self, row: &MetricsRow) -> io::Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Writes rows as CSV with a header line.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W) -> Self {
        CsvSink { writer: csv::Writer::from_writer(inner) }
    }

    pub fn into_inner(self) -> io::Result<W> {
        self.writer.into_inner().map_err(|e| e.into_error())
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn write_row(&mut self, row: &MetricsRow) -> io::Result<()> {
        self.writer.serialize(row).map_err(csv_to_io)
    }

    fn finish(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

fn csv_to_io(e: csv::Error) -> io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => io::Error::other(format!("{other:?}")),
    }
}

/// File names inside a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub const METRICS: &'static str = "metrics.csv";
    pub const RESPONSE: &'static str = "response.csv";
    pub const CHECKPOINT: &'static str = "checkpoint.bin";
    pub const CONFIG: &'static str = "config.json";
    pub const PARTIAL_MARKER: &'static str = "PARTIAL";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunFiles { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(Self::METRICS)
    }
    pub fn response(&self) -> PathBuf {
        self.dir.join(Self::RESPONSE)
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(Self::CHECKPOINT)
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join(Self::CONFIG)
    }
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SimError> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| SimError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SimError::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

#[derive(Serialize)]
struct ResponseCsvRow<'a> {
    run_id: &'a str,
    agent: usize,
    other_prev_action: &'a str,
    connect_fraction: Option<f64>,
    n_samples: u64,
}

pub(crate) fn response_csv(summary: &RunSummary) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (agent, r) in summary.response.agents.iter().enumerate() {
        for (action, cell) in [
            (InteractionAction::Cooperate, r.after_cooperate),
            (InteractionAction::Defect, r.after_defect),
        ] {
            w.serialize(ResponseCsvRow {
                run_id: &summary.run_id,
                agent,
                other_prev_action: action.as_str(),
                connect_fraction: cell.fraction(),
                n_samples: cell.samples,
            })?;
        }
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Run `config` and write its files into `dir` (created if missing).
///
/// The metrics CSV is streamed to a temporary file and renamed on success.
/// If the sink fails, the partial file is kept as `metrics.csv.partial`
/// next to a `PARTIAL` marker.
pub fn run_to_dir(
    config: &RunConfig,
    dir: &Path,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<RunSummary, SimError> {
    let files = RunFiles::new(dir);
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let sim = Simulation::new(config.clone())?;

    let config_json = serde_json::to_vec_pretty(config).expect("config serializes");
    write_atomic(&files.config(), &config_json)?;

    let metrics_path = files.metrics();
    let tmp = tmp_path(&metrics_path);
    let file = fs::File::create(&tmp).map_err(|e| SimError::io(&tmp, e))?;
    let mut sink = CsvSink::new(io::BufWriter::new(file));
    let summary = match run_single_with(sim, &mut sink, progress) {
        Ok(s) => s,
        Err(err) => {
            drop(sink);
            if matches!(err, SimError::Sink { .. }) {
                let _ = fs::rename(&tmp, metrics_path.with_extension("csv.partial"));
                let _ = fs::write(dir.join(RunFiles::PARTIAL_MARKER), err.to_string());
            } else {
                let _ = fs::remove_file(&tmp);
            }
            return Err(err);
        }
    };
    let writer = sink.into_inner().map_err(|e| SimError::io(&tmp, e))?;
    writer.into_inner().map_err(|e| SimError::io(&tmp, e.into_error()))?.sync_all().ok();
    fs::rename(&tmp, &metrics_path).map_err(|e| SimError::io(&metrics_path, e))?;

    let response = response_csv(&summary).map_err(|e| SimError::Format {
        path: files.response(),
        message: e.to_string(),
    })?;
    write_atomic(&files.response(), &response)?;
    write_atomic(&files.checkpoint(), &summary.checkpoint.to_bytes())?;
    Ok(summary)
}
