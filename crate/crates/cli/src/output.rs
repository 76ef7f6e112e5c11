//! Machine-readable artifacts: metric CSVs and trajectory JSON-lines.
//!
//! Floats are written with Rust's shortest-roundtrip formatting, which is
//! deterministic, so identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lovis_core::error::{Error, Result};
use lovis_core::metrics::MetricSummary;
use lovis_core::trainer::{EvalEpisode, HistoryRow};
use serde::{Deserialize, Serialize};

pub const HISTORY_HEADER: &str = "iteration,split,NE,SR,SPL,CLS,nDTW,sDTW";

fn summary_fields(s: &MetricSummary) -> String {
    format!("{},{},{},{},{},{}", s.ne, s.sr, s.spl, s.cls, s.ndtw, s.sdtw)
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for row in rows {
        writeln!(
            text,
            "{},{},{}",
            row.iteration,
            row.split,
            summary_fields(&row.summary)
        )
        .expect("writing to a string cannot fail");
    }
    fs::write(path, text)?;
    Ok(())
}

/// One split's aggregate as a CSV table; `fidelity` controls whether the
/// path-fidelity columns are included (the single-goal style reports only
/// goal metrics, the joined style adds CLS/nDTW/sDTW).
pub fn summary_csv(rows: &[(String, MetricSummary)], fidelity: bool) -> String {
    let mut text = String::from(if fidelity {
        "split,n,NE,SR,SPL,CLS,nDTW,sDTW"
    } else {
        "split,n,NE,SR,SPL"
    });
    text.push('\n');
    for (split, s) in rows {
        if fidelity {
            writeln!(
                text,
                "{split},{},{},{},{},{},{},{}",
                s.n, s.ne, s.sr, s.spl, s.cls, s.ndtw, s.sdtw
            )
        } else {
            writeln!(text, "{split},{},{},{},{}", s.n, s.ne, s.sr, s.spl)
        }
        .expect("writing to a string cannot fail");
    }
    text
}

/// The same table formatted for human eyes.
pub fn summary_text(rows: &[(String, MetricSummary)], fidelity: bool) -> String {
    let mut text = String::new();
    if fidelity {
        writeln!(
            text,
            "{:<12} {:>5} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "split", "n", "NE", "SR", "SPL", "CLS", "nDTW", "sDTW"
        )
        .unwrap();
    } else {
        writeln!(
            text,
            "{:<12} {:>5} {:>7} {:>6} {:>6}",
            "split", "n", "NE", "SR", "SPL"
        )
        .unwrap();
    }
    for (split, s) in rows {
        if fidelity {
            writeln!(
                text,
                "{:<12} {:>5} {:>7.2} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                split, s.n, s.ne, s.sr, s.spl, s.cls, s.ndtw, s.sdtw
            )
        } else {
            writeln!(
                text,
                "{:<12} {:>5} {:>7.2} {:>6.3} {:>6.3}",
                split, s.n, s.ne, s.sr, s.spl
            )
        }
        .unwrap();
    }
    text
}

/// One trajectory per line. Evaluation writes these; the metrics command
/// reads them back. Reference files may be dataset split files, which carry
/// extra fields; only these two are looked at.
#[derive(Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub house_id: usize,
    pub path: Vec<usize>,
}

pub fn write_trajectories(path: &Path, records: &[EvalEpisode]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        let line = serde_json::to_string(&TrajectoryRecord {
            house_id: r.house_id,
            path: r.predicted.clone(),
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no trajectories",
            path.display()
        )));
    }
    Ok(out)
}
