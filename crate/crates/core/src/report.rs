//! Run records and their per-setting summaries.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one training run, stored one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    /// Train:val:test ratio, e.g. `"6:1:3"`.
    pub ratio: String,
    pub patch: usize,
    pub config: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_oa: f64,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub params: u64,
    pub madds: u64,
    pub seconds: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub ratio: String,
    pub patch: usize,
    pub config: String,
    pub runs: usize,
    pub oa_mean: f64,
    pub oa_std: f64,
    pub aa_mean: f64,
    pub aa_std: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
    pub params: u64,
    pub madds: u64,
}

/// One row per (dataset, ratio, patch, config), sorted by that key.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, usize, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.clone(), r.ratio.clone(), r.patch, r.config.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, ratio, patch, config), rs)| {
            let col = |f: fn(&RunRecord) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (oa_mean, oa_std) = col(|r| r.oa);
            let (aa_mean, aa_std) = col(|r| r.aa);
            let (kappa_mean, kappa_std) = col(|r| r.kappa);
            SummaryRow {
                dataset,
                ratio,
                patch,
                config,
                runs: rs.len(),
                oa_mean,
                oa_std,
                aa_mean,
                aa_std,
                kappa_mean,
                kappa_std,
                params: rs[0].params,
                madds: rs[0].madds,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "dataset,ratio,patch,config,runs,oa_mean,oa_std,aa_mean,aa_std,kappa_mean,kappa_std,params,madds\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.dataset,
            r.ratio,
            r.patch,
            r.config,
            r.runs,
            r.oa_mean,
            r.oa_std,
            r.aa_mean,
            r.aa_std,
            r.kappa_mean,
            r.kappa_std,
            r.params,
            r.madds
        ));
    }
    s
}

pub fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(config: &str, oa: f64) -> RunRecord {
        RunRecord {
            dataset: "synth".into(),
            ratio: "6:1:3".into(),
            patch: 9,
            config: config.into(),
            seed: 0,
            best_epoch: 1,
            val_oa: oa,
            oa,
            aa: oa,
            kappa: oa,
            params: 10,
            madds: 20,
            seconds: 1.0,
        }
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn groups_by_setting() {
        let rows = summarize(&[record("b", 0.9), record("a", 0.8), record("b", 0.7)]);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].config.as_str(), rows[0].runs), ("a", 1));
        assert!((rows[1].oa_mean - 0.8).abs() < 1e-12);
        let csv = summary_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.jsonl");
        append_record(&p, &record("a", 0.5)).unwrap();
        append_record(&p, &record("b", 0.6)).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back, vec![record("a", 0.5), record("b", 0.6)]);
    }
}
