//! Flat CSV and aggregate JSON views of experiment runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{RunFile, RunRow};

pub const CSV_HEADER: &str = "task,method,m,e,seed,val_acc,test_acc,lambda_digest";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[RunRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.task,
            r.method,
            r.m,
            r.e,
            r.seed,
            opt(r.val_acc),
            opt(r.test_acc),
            r.lambda_digest
        ));
    }
    out
}

/// Test-accuracy statistics of one (method, m, e) cell. The standard
/// deviation is the population one, so a single run gives 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub m: usize,
    pub e: usize,
    pub count: usize,
    pub failed: usize,
    pub sum: f64,
    pub mean: f64,
    pub std: f64,
    pub val_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: usize,
    pub failed: usize,
    pub test_sum: f64,
    pub cells: Vec<CellSummary>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(rows: &[RunRow]) -> Summary {
    let mut groups: BTreeMap<(String, usize, usize), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), r.m, r.e)).or_default().push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((method, m, e), rs)| {
            let tests: Vec<f64> = rs.iter().filter_map(|r| r.test_acc).collect();
            let vals: Vec<f64> = rs.iter().filter_map(|r| r.val_acc).collect();
            let (mean, std) = mean_std(&tests);
            CellSummary {
                method,
                m,
                e,
                count: tests.len(),
                failed: rs.len() - tests.len(),
                sum: tests.iter().sum(),
                mean,
                std,
                val_mean: mean_std(&vals).0,
            }
        })
        .collect::<Vec<_>>();
    Summary {
        rows: rows.len(),
        failed: rows.iter().filter(|r| r.test_acc.is_none()).count(),
        test_sum: rows.iter().filter_map(|r| r.test_acc).sum(),
        cells,
    }
}

/// Reads run files; unreadable or malformed ones are skipped and reported
/// in the returned warnings.
pub fn load_runs(paths: &[impl AsRef<Path>]) -> (Vec<RunRow>, Vec<String>) {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let parsed = std::fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))
            .and_then(|text| Ok(serde_json::from_str::<RunFile>(&text)?));
        match parsed {
            Ok(run) => rows.extend(run.rows),
            Err(e) => warnings.push(format!("{}: {e}", p.display())),
        }
    }
    (rows, warnings)
}

/// Writes `<stem>.csv` and `<stem>.json` next to each other.
pub fn write_report(rows: &[RunRow], csv: &Path, json: &Path) -> Result<Summary> {
    let summary = summarize(rows);
    std::fs::write(csv, to_csv(rows)).map_err(|e| Error::io(csv, e))?;
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(json, text).map_err(|e| Error::io(json, e))?;
    Ok(summary)
}
