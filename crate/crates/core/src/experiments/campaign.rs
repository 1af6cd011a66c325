// SPDX-License-Identifier: MIT OR Apache-2.0

//! Campaign directory layout:
//!
//! ```text
//! DIR/config.json
//! DIR/runs.jsonl           one RunPairReport per line, sorted by key
//! DIR/runs.partial.jsonl   completed runs of an unfinished campaign
//! DIR/metrics/*.csv
//! DIR/stats/*.csv
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::behavioral::RunPairReport;
use super::config::CampaignConfig;
use crate::error::{io_err, Error, Result};
use crate::stats::{write_stats_csv, StatRow};

pub const CONFIG_FILE: &str = "config.json";
pub const RUNS_FILE: &str = "runs.jsonl";
pub const PARTIAL_FILE: &str = "runs.partial.jsonl";
pub const METRICS_DIR: &str = "metrics";
pub const STATS_DIR: &str = "stats";

/// A campaign output directory.
#[derive(Debug)]
pub struct CampaignDir {
    root: PathBuf,
    partial: Mutex<Option<BufWriter<File>>>,
}

fn is_empty_dir(p: &Path) -> Result<bool> {
    Ok(fs::read_dir(p).map_err(io_err(p))?.next().is_none())
}

impl CampaignDir {
    /// Creates or reopens `root`. A non-empty directory is refused unless
    /// `resume` is set.
    pub fn open(root: &Path, resume: bool) -> Result<Self> {
        if root.exists() {
            if !root.is_dir() {
                return Err(Error::Campaign { path: root.into(), reason: "not a directory".into() });
            }
            if !resume && !is_empty_dir(root)? {
                let reason = if root.join(PARTIAL_FILE).exists() {
                    format!("unfinished campaign ({PARTIAL_FILE} present); pass --resume to continue it")
                } else {
                    "directory is not empty; pass --resume or choose a clean directory".to_string()
                };
                return Err(Error::Campaign { path: root.into(), reason });
            }
        }
        for d in [root.to_path_buf(), root.join(METRICS_DIR), root.join(STATS_DIR)] {
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(CampaignDir { root: root.into(), partial: Mutex::new(None) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_config(&self, cfg: &CampaignConfig) -> Result<()> {
        let p = self.root.join(CONFIG_FILE);
        fs::write(&p, cfg.to_json()?).map_err(io_err(&p))
    }

    /// Records already completed by an interrupted run.
    pub fn load_partial(&self) -> Result<Vec<RunPairReport>> {
        let p = self.root.join(PARTIAL_FILE);
        if !p.exists() {
            return Ok(Vec::new());
        }
        let f = File::open(&p).map_err(io_err(&p))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(&p))?;
            // a torn last line from an interrupted write is dropped
            if let Ok(r) = serde_json::from_str::<RunPairReport>(&line) {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// Appends one completed record to the partial file.
    pub fn append_partial(&self, r: &RunPairReport) -> Result<()> {
        let p = self.root.join(PARTIAL_FILE);
        let mut guard = self.partial.lock().expect("partial writer poisoned");
        if guard.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
            *guard = Some(BufWriter::new(f));
        }
        let w = guard.as_mut().expect("opened above");
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n").map_err(io_err(&p))?;
        w.flush().map_err(io_err(&p))
    }

    /// Writes the sorted `runs.jsonl` and drops the partial file.
    pub fn finish_runs(&self, runs: &[RunPairReport]) -> Result<()> {
        let p = self.root.join(RUNS_FILE);
        let f = File::create(&p).map_err(io_err(&p))?;
        let mut w = BufWriter::new(f);
        for r in runs {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(io_err(&p))?;
        }
        w.flush().map_err(io_err(&p))?;
        *self.partial.lock().expect("partial writer poisoned") = None;
        let part = self.root.join(PARTIAL_FILE);
        if part.exists() {
            fs::remove_file(&part).map_err(io_err(&part))?;
        }
        Ok(())
    }

    pub fn write_metrics(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        write_csv(&self.root.join(METRICS_DIR).join(name), header, rows)
    }

    pub fn write_stats(&self, name: &str, rows: &[StatRow]) -> Result<()> {
        let p = self.root.join(STATS_DIR).join(name);
        let f = File::create(&p).map_err(io_err(&p))?;
        write_stats_csv(BufWriter::new(f), rows)
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads `runs.jsonl` of a finished campaign.
pub fn load_runs(root: &Path) -> Result<Vec<RunPairReport>> {
    let p = root.join(RUNS_FILE);
    if !p.exists() {
        let reason = if root.join(PARTIAL_FILE).exists() {
            format!("missing {RUNS_FILE} (campaign unfinished; resume it first)")
        } else {
            format!("missing {RUNS_FILE}")
        };
        return Err(Error::Campaign { path: root.into(), reason });
    }
    let f = File::open(&p).map_err(io_err(&p))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&p))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Campaign {
            path: p.clone(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Formats an optional number, `NA` when absent.
pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}
