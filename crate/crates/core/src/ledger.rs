//! CSV ledgers for run records and retention curves.
//!
//! Floats are written in shortest round-trip form, so a parsed ledger
//! reproduces every metric bit for bit.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, ScsmError};

pub const RUN_HEADER: &str =
    "config_hash,stage,variant,seed,k,mode,batch,steps,losses,accuracy,base_accuracy,backbone_checksum,wall_seconds";
pub const RETENTION_HEADER: &str = "variant,seed,k,stage,q,accuracy";

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    /// `base` or `novel`.
    pub stage: String,
    pub variant: String,
    pub seed: u64,
    /// Shots; 0 for base runs.
    pub k: usize,
    pub mode: String,
    pub batch: usize,
    /// Epochs for base runs, optimizer steps for novel runs.
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Base accuracy for base runs, novel accuracy for novel runs.
    pub accuracy: f64,
    pub base_accuracy: Option<f64>,
    pub backbone_checksum: String,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let losses: Vec<String> = self.losses.iter().map(|l| format!("{l:?}")).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{:?},{},{},{:.3}",
            self.config_hash,
            self.stage,
            self.variant,
            self.seed,
            self.k,
            self.mode,
            self.batch,
            self.steps,
            losses.join(";"),
            self.accuracy,
            self.base_accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
            self.backbone_checksum,
            self.wall_seconds
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 13 {
            return Err(ScsmError::Format(format!("expected 13 ledger fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| ScsmError::Format(format!("bad {what} '{s}'")))
        };
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse().map_err(|_| ScsmError::Format(format!("bad {what} '{s}'")))
        };
        let losses = if f[8].is_empty() {
            Vec::new()
        } else {
            f[8].split(';').map(|s| num(s, "loss")).collect::<Result<_>>()?
        };
        Ok(Self {
            config_hash: f[0].into(),
            stage: f[1].into(),
            variant: f[2].into(),
            seed: int(f[3], "seed")?,
            k: int(f[4], "k")? as usize,
            mode: f[5].into(),
            batch: int(f[6], "batch")? as usize,
            steps: int(f[7], "steps")? as usize,
            losses,
            accuracy: num(f[9], "accuracy")?,
            base_accuracy: if f[10].is_empty() { None } else { Some(num(f[10], "base accuracy")?) },
            backbone_checksum: f[11].into(),
            wall_seconds: num(f[12], "wall time")?,
        })
    }

    /// Everything except the wall time, for reproducibility comparisons.
    pub fn metrics_key(&self) -> String {
        let line = self.to_csv();
        line[..line.rfind(',').expect("fixed field count")].to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionRow {
    pub variant: String,
    pub seed: u64,
    pub k: usize,
    pub stage: usize,
    pub q: f64,
    pub accuracy: f64,
}

impl RetentionRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{:?},{:?}", self.variant, self.seed, self.k, self.stage, self.q, self.accuracy)
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || ScsmError::Format(format!("bad retention row '{line}'"));
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(Self {
            variant: f[0].into(),
            seed: f[1].parse().map_err(|_| bad())?,
            k: f[2].parse().map_err(|_| bad())?,
            stage: f[3].parse().map_err(|_| bad())?,
            q: f[4].parse().map_err(|_| bad())?,
            accuracy: f[5].parse().map_err(|_| bad())?,
        })
    }
}

/// Appends `lines` under `header`, writing the header for a new file and
/// refusing to mix headers in an existing one.
pub fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    if exists {
        let text = std::fs::read_to_string(path).map_err(|e| ScsmError::io(path, e))?;
        if text.lines().next() != Some(header) {
            return Err(ScsmError::Format(format!("{} has a different header", path.display())));
        }
    } else if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ScsmError::io(dir, e))?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ScsmError::io(path, e))?;
    let mut buf = String::new();
    if !exists {
        buf.push_str(header);
        buf.push('\n');
    }
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| ScsmError::io(path, e))
}

pub fn append_runs(path: &Path, records: &[RunRecord]) -> Result<()> {
    append_lines(path, RUN_HEADER, &records.iter().map(RunRecord::to_csv).collect::<Vec<_>>())
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    read_body(path, RUN_HEADER)?.iter().map(|l| RunRecord::from_csv(l)).collect()
}

pub fn read_retention(path: &Path) -> Result<Vec<RetentionRow>> {
    read_body(path, RETENTION_HEADER)?.iter().map(|l| RetentionRow::from_csv(l)).collect()
}

fn read_body(path: &Path, header: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| ScsmError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(ScsmError::Format(format!("{} does not start with the expected header", path.display())));
    }
    Ok(lines.filter(|l| !l.is_empty()).map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> RunRecord {
        RunRecord {
            config_hash: "abc".into(),
            stage: "novel".into(),
            variant: "sfm_csm".into(),
            seed: 3,
            k: 5,
            mode: "fsod".into(),
            batch: 16,
            steps: 200,
            losses: vec![1.0 / 3.0, 0.1 + 0.2],
            accuracy: 0.7125,
            base_accuracy: None,
            backbone_checksum: "ff".into(),
            wall_seconds: 1.25,
        }
    }

    #[test]
    fn record_round_trip_is_exact() {
        let r = record();
        assert_eq!(RunRecord::from_csv(&r.to_csv()).unwrap(), r);
        let g = RunRecord { base_accuracy: Some(0.9), ..record() };
        assert_eq!(RunRecord::from_csv(&g.to_csv()).unwrap(), g);
        assert_eq!(RUN_HEADER.split(',').count(), 13);
    }

    #[test]
    fn metrics_key_ignores_wall_time() {
        let a = record();
        let b = RunRecord { wall_seconds: 99.0, ..record() };
        assert_eq!(a.metrics_key(), b.metrics_key());
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        append_runs(&p, &[record()]).unwrap();
        append_runs(&p, &[record()]).unwrap();
        assert_eq!(read_runs(&p).unwrap().len(), 2);
        assert!(append_lines(&p, RETENTION_HEADER, &[]).is_err());
    }
}
