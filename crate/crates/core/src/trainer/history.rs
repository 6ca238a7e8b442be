//! `metrics.csv` rows and the `refresh.jsonl` log of weight refreshes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::eval::Metrics;
use crate::Result;

pub const METRICS_FILE: &str = "metrics.csv";
pub const REFRESH_FILE: &str = "refresh.jsonl";

/// One line of `metrics.csv`. Retrieval columns are empty on `train` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub map: Option<f64>,
    pub loss: Option<f64>,
    pub n_boosted: usize,
}

impl MetricsRow {
    pub fn train(epoch: usize, loss: f64, n_boosted: usize) -> Self {
        Self {
            epoch,
            split: "train".into(),
            r1: None,
            r5: None,
            r10: None,
            map: None,
            loss: Some(loss),
            n_boosted,
        }
    }

    pub fn eval(epoch: usize, split: &str, m: Metrics, loss: Option<f64>, n_boosted: usize) -> Self {
        Self {
            epoch,
            split: split.into(),
            r1: Some(m.r1),
            r5: Some(m.r5),
            r10: Some(m.r10),
            map: Some(m.map),
            loss,
            n_boosted,
        }
    }

    pub fn metrics(&self) -> Option<Metrics> {
        Some(Metrics {
            r1: self.r1?,
            r5: self.r5?,
            r10: self.r10?,
            map: self.map?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["epoch", "split", "r1", "r5", "r10", "map", "loss", "n_boosted"])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::Error::malformed("metrics.csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

pub fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    binfmt::write_file(&dir.join(METRICS_FILE), metrics_csv(rows)?)
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics_csv(&binfmt::read_string(&dir.join(METRICS_FILE))?)
}

/// What one weight refresh found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    /// Completed epochs when the refresh ran.
    pub epoch: usize,
    pub k: usize,
    /// Size of the rank-k weak-positive set.
    pub n_mined: usize,
    /// Pairs whose own image was already at rank 1.
    pub n_rank1: usize,
    pub n_boosted: usize,
    /// Pairs mined at the previous refresh.
    pub n_prev_mined: usize,
    /// Of those, pairs whose own image is now at rank 1.
    pub n_promoted: usize,
}

impl RefreshRecord {
    pub fn promoted_fraction(&self) -> Option<f64> {
        (self.n_prev_mined > 0).then(|| self.n_promoted as f64 / self.n_prev_mined as f64)
    }
}

pub fn refresh_jsonl(records: &[RefreshRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_refresh_jsonl(text: &str) -> Result<Vec<RefreshRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| crate::Error::malformed("refresh log", format!("line {}: {e}", n + 1)))
        })
        .collect()
}
