//! Report merging: one comparison table across run directories, as markdown
//! and CSV, with a dataset-hash guard.

use crate::config::TrainConfig;
use crate::error::{AldmError, Result};
use crate::eval::MetricsReport;
use crate::trainer::{Phase, RunLog};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub k: Option<usize>,
    pub overhead_ms: Option<f64>,
}

/// Load a run directory: metrics.json is required; config and run log, when
/// present, contribute the unroll depth and the per-iteration wall clock.
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let report = MetricsReport::load(&dir.join("metrics.json")).map_err(|e| {
        AldmError::invalid(format!("{}: no usable metrics.json ({e})", dir.display()))
    })?;
    let k = TrainConfig::load(&dir.join("config.toml")).ok().map(|c| c.unroll.k);
    let overhead_ms = RunLog::at(&dir.join("runlog.ndjson")).ok().and_then(|log| {
        let wall: Vec<f64> = log
            .records
            .iter()
            .filter(|r| r.phase == Phase::Gen)
            .map(|r| r.wall_ms)
            .collect();
        if wall.is_empty() {
            None
        } else {
            Some(wall.iter().sum::<f64>() / wall.len() as f64)
        }
    });
    Ok(RunSummary { dir: dir.to_path_buf(), report, k, overhead_ms })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Merge runs into a markdown table and a CSV body. All runs must carry the
/// same dataset hash; a mismatch aborts without a partial table.
pub fn merge_reports(dirs: &[PathBuf]) -> Result<(String, String)> {
    if dirs.is_empty() {
        return Err(AldmError::invalid("no run directories given"));
    }
    let mut runs: Vec<RunSummary> = dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let first_hash = runs[0].report.dataset_hash.clone();
    for r in &runs {
        if r.report.dataset_hash != first_hash {
            return Err(AldmError::HashMismatch(format!(
                "{} evaluated dataset {}, expected {}",
                r.dir.display(),
                r.report.dataset_hash,
                first_hash
            )));
        }
    }
    runs.sort_by(|a, b| {
        a.k.unwrap_or(0)
            .cmp(&b.k.unwrap_or(0))
            .then_with(|| a.report.mode.cmp(&b.report.mode))
    });

    let mut md = String::new();
    md.push_str("| mode | K | mIoU | style acc | diversity | ms/iter |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    let mut csv = String::from("mode,k,miou,style_accuracy,diversity,ms_per_iter,dataset_hash\n");
    for r in &runs {
        let k_s = r.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
        md.push_str(&format!(
            "| {} | {} | {:.3} | {:.3} | {:.3} | {} |\n",
            r.report.mode,
            k_s,
            r.report.miou,
            r.report.style_accuracy,
            r.report.diversity,
            fmt_opt(r.overhead_ms),
        ));
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{},{}\n",
            r.report.mode,
            k_s,
            r.report.miou,
            r.report.style_accuracy,
            r.report.diversity,
            fmt_opt(r.overhead_ms),
            r.report.dataset_hash,
        ));
    }
    Ok((md, csv))
}
