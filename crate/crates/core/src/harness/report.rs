//! Comparison tables over finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::train::{RunSummary, SUMMARY_FILE};
use crate::error::{Error, Result};

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub runs: usize,
    pub params_infer: u64,
    pub params_train: u64,
    pub macs: Option<u64>,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top5_mean: f64,
    pub top5_std: f64,
}

/// Groups runs by experiment name, in order of first appearance.
pub fn summarize(runs: &[RunSummary]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<usize, (String, Vec<&RunSummary>)> = BTreeMap::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for r in runs {
        let next = index.len();
        let i = *index.entry(&r.name).or_insert(next);
        groups
            .entry(i)
            .or_insert_with(|| (r.name.clone(), Vec::new()))
            .1
            .push(r);
    }
    groups
        .into_values()
        .map(|(name, rs)| {
            let top1: Vec<f64> = rs.iter().map(|r| r.final_top1).collect();
            let top5: Vec<f64> = rs.iter().map(|r| r.final_top5).collect();
            let (top1_mean, top1_std) = mean_std(&top1);
            let (top5_mean, top5_std) = mean_std(&top5);
            ReportRow {
                name,
                runs: rs.len(),
                params_infer: rs[0].account.params_infer,
                params_train: rs[0].account.params_train,
                macs: rs[0].account.macs,
                top1_mean,
                top1_std,
                top5_mean,
                top5_std,
            }
        })
        .collect()
}

/// Loads `summary.json` from each run directory.
pub fn load_runs<P: AsRef<Path>>(dirs: &[P]) -> Result<Vec<RunSummary>> {
    dirs.iter()
        .map(|d| {
            let p = d.as_ref().join(SUMMARY_FILE);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn millions(n: u64) -> String {
    format!("{:.3}M", n as f64 / 1e6)
}

pub fn render_text(rows: &[ReportRow]) -> String {
    let header = ["name", "runs", "#params", "#params(train)", "MACs", "top-1", "top-5"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.runs.to_string(),
                millions(r.params_infer),
                millions(r.params_train),
                r.macs.map(millions).unwrap_or_else(|| "-".into()),
                format!("{:.2} ± {:.2}", r.top1_mean, r.top1_std),
                format!("{:.2} ± {:.2}", r.top5_mean, r.top5_std),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    line(
        widths
            .iter()
            .map(|&w| &"----------------------------------------"[..w.min(40)])
            .collect(),
        &mut out,
    );
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("name,runs,params_infer,params_train,macs,top1_mean,top1_std,top5_mean,top5_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.name,
            r.runs,
            r.params_infer,
            r.params_train,
            r.macs.map(|m| m.to_string()).unwrap_or_default(),
            r.top1_mean,
            r.top1_std,
            r.top5_mean,
            r.top5_std
        );
    }
    out
}
