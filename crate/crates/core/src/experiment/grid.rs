use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::output::write_atomic;
use super::{run_to_dir, Bias, FrozenRewiring, RunConfig, RunFiles};
use crate::env::RewiringSchedule;
use crate::error::SimError;

pub const MANIFEST: &str = "manifest.json";

/// A treatment cell: schedule, bias and whether rewiring is learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Condition {
    pub schedule: RewiringSchedule,
    pub bias: Bias,
    pub rewiring_learning: bool,
    pub frozen_rewiring: FrozenRewiring,
}

impl Condition {
    pub fn new(schedule: RewiringSchedule, bias: Bias) -> Self {
        Condition { schedule, bias, rewiring_learning: true, frozen_rewiring: FrozenRewiring::UniformRandom }
    }

    /// A config for this cell with every other field taken from `base`.
    pub fn config(&self, base: &RunConfig, seed: u64) -> RunConfig {
        RunConfig {
            schedule: self.schedule,
            bias: self.bias,
            rewiring_learning: self.rewiring_learning,
            frozen_rewiring: self.frozen_rewiring,
            seed,
            ..base.clone()
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    /// `schedule:bias` with an optional `:frozen` or `:frozennet` suffix.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let (schedule, bias, suffix) = match parts.as_slice() {
            [s, b] => (s, b, None),
            [s, b, x] => (s, b, Some(*x)),
            _ => return Err(format!("condition `{s}` is not schedule:bias[:frozen|:frozennet]")),
        };
        let mut c = Condition::new(schedule.parse()?, bias.parse()?);
        match suffix {
            None => {}
            Some("frozen") => c.rewiring_learning = false,
            Some("frozennet") => {
                c.rewiring_learning = false;
                c.frozen_rewiring = FrozenRewiring::RandomNetwork;
            }
            Some(x) => return Err(format!("unknown condition suffix `{x}`")),
        }
        Ok(c)
    }
}

/// The 3 x 3 schedule-by-bias grid plus ostracism bias under each schedule.
pub fn default_conditions() -> Vec<Condition> {
    let mut out = Vec::with_capacity(12);
    for bias in [Bias::NoBias, Bias::AllcBias, Bias::TftBias, Bias::OstracismBias] {
        for schedule in RewiringSchedule::ALL {
            out.push(Condition::new(schedule, bias));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub run_id: String,
    pub condition: String,
    pub schedule: RewiringSchedule,
    pub bias: Bias,
    pub rewiring_learning: bool,
    pub seed: u64,
    pub episodes: u64,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// Paths are relative to the manifest's directory.
    pub metrics: String,
    pub response: String,
    pub checkpoint: String,
    pub config: String,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub runs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(runs: Vec<ManifestEntry>) -> Self {
        Manifest { code_version: env!("CARGO_PKG_VERSION").to_string(), runs }
    }

    pub fn read(dir: &Path) -> Result<Self, SimError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| SimError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| SimError::Format { path, message: e.to_string() })
    }

    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST), &bytes)
    }
}

fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Run one config into `run_dir` and describe it relative to `root`.
pub(crate) fn run_entry(config: &RunConfig, root: &Path, run_dir: &Path, progress: &mut dyn FnMut(&super::MetricsRow)) -> ManifestEntry {
    let start = Instant::now();
    let result = run_to_dir(config, run_dir, progress);
    let files = RunFiles::new(run_dir);
    let (status, error) = match result {
        Ok(_) => (RunStatus::Ok, None),
        Err(e) => (RunStatus::Failed, Some(e.to_string())),
    };
    ManifestEntry {
        run_id: config.run_id(),
        condition: config.condition_label(':'),
        schedule: config.schedule,
        bias: config.bias,
        rewiring_learning: config.rewiring_learning,
        seed: config.seed,
        episodes: config.episodes,
        status,
        error,
        metrics: rel(root, &files.metrics()),
        response: rel(root, &files.response()),
        checkpoint: rel(root, &files.checkpoint()),
        config: rel(root, &files.config()),
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Run one config with its files directly in `out`, plus a one-entry manifest.
pub fn run_single_entry(
    config: &RunConfig,
    out: &Path,
    progress: &mut dyn FnMut(&super::MetricsRow),
) -> Result<ManifestEntry, SimError> {
    fs::create_dir_all(out).map_err(|e| SimError::io(out, e))?;
    let entry = run_entry(config, out, out, progress);
    Manifest::new(vec![entry.clone()]).write(out)?;
    Ok(entry)
}

/// Execute every config in isolation under `out/runs/<run_id>/` and write
/// `out/manifest.json`. A failing run is recorded and the grid continues.
pub fn run_grid(
    configs: &[RunConfig],
    out: &Path,
    parallelism: usize,
    on_done: &(dyn Fn(&ManifestEntry) + Sync),
) -> Result<Manifest, SimError> {
    fs::create_dir_all(out).map_err(|e| SimError::io(out, e))?;
    let runs_dir: PathBuf = out.join("runs");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let entries: Vec<ManifestEntry> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let entry = run_entry(c, out, &runs_dir.join(c.run_id()), &mut |_| {});
                on_done(&entry);
                entry
            })
            .collect()
    });
    let manifest = Manifest::new(entries);
    manifest.write(out)?;
    Ok(manifest)
}
