//! Aggregation of result records into tables and plot data.
//!
//! Outputs per task label:
//! - `table1_<label>.csv` — seed-averaged probe accuracies per (method,
//!   residual_dim) row.
//! - `table3_<label>.csv` — per-residual-size r² of each leakage metric
//!   against C⁺.
//!
//! Plus, across all tasks:
//! - `curves.json` — residual_dim → mean ± std series per task, method and
//!   probe, for plotting.
//! - `records.csv` — the flat union of every record's scalar fields.
//!
//! Aggregation is order-independent: records are sorted by config hash on
//! load and every grouping goes through ordered maps, so the same record
//! set always produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crbm_core::error::{CoreError, Result};
use crbm_core::intervene::summarize;
use crbm_core::metrics::{metric_table, MetricPoint};
use crbm_core::model::Method;

use crate::runner::{read_record, ResultRecord};

/// Reads every `*.json` record in a results directory, sorted by hash.
pub fn load_records(dir: &Path) -> Result<Vec<ResultRecord>> {
    let entries =
        fs::read_dir(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    let mut records = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CoreError::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) == Some("json") {
            records.push(read_record(&path)?);
        }
    }
    records.sort_by(|a, b| a.config_hash.cmp(&b.config_hash));
    Ok(records)
}

#[derive(Debug)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct CurvePoint {
    residual_dim: usize,
    mean: f64,
    std: f64,
    n: usize,
}

/// task label -> method -> probe -> series sorted by residual_dim.
type Curves = BTreeMap<String, BTreeMap<String, BTreeMap<String, Vec<CurvePoint>>>>;

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), fmt)
}

fn method_rank(m: Method) -> usize {
    Method::ALL.iter().position(|&x| x == m).unwrap_or(usize::MAX)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Seed-averaged accuracy table for one task, one row per
/// (method, residual_dim). Bottleneck rows print "-" in the residual
/// columns.
fn table1(records: &[&ResultRecord]) -> String {
    let mut groups: BTreeMap<(usize, usize), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((method_rank(r.method), r.residual_dim))
            .or_default()
            .push(r);
    }
    let mut out = String::from(
        "method,residual_dim,seeds,B_mean,B_std,C_pos_mean,C_pos_std,C_neg_mean,C_neg_std,R_neg_mean,R_neg_std\n",
    );
    for ((rank, dim), group) in groups {
        let method = Method::ALL[rank];
        let b = summarize(&group.iter().map(|r| r.b).collect::<Vec<_>>());
        let c_pos = summarize(&group.iter().map(|r| r.c_pos).collect::<Vec<_>>());
        let c_neg = summarize(&group.iter().map(|r| r.c_neg).collect::<Vec<_>>());
        let r_neg_vals: Vec<f64> = group.iter().filter_map(|r| r.r_neg).collect();
        let r_neg = (r_neg_vals.len() == group.len()).then(|| summarize(&r_neg_vals));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            method.as_str(),
            dim,
            group.len(),
            fmt(b.mean),
            fmt(b.std),
            fmt(c_pos.mean),
            fmt(c_pos.std),
            fmt(c_neg.mean),
            fmt(c_neg.std),
            fmt_opt(r_neg.as_ref().map(|s| s.mean)),
            fmt_opt(r_neg.as_ref().map(|s| s.std)),
        ));
    }
    out
}

/// Per-residual-size r² of each metric against C⁺, over this task's CRBM
/// records.
fn table3(records: &[&ResultRecord]) -> String {
    let points: Vec<MetricPoint> = records
        .iter()
        .filter(|r| r.residual_dim > 0)
        .map(|r| MetricPoint {
            residual_dim: r.residual_dim,
            c_pos: r.c_pos,
            cc: r.cc_metric,
            mi: r.mi_metric,
        })
        .collect();
    let mut out = String::from("residual_dim,n_points,r2_cc,r2_mi\n");
    for row in metric_table(&points) {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.residual_dim,
            row.n_points,
            fmt(row.r2_cc),
            fmt(row.r2_mi),
        ));
    }
    out
}

fn curves(records: &[ResultRecord]) -> Curves {
    // (task, method, probe, dim) -> per-seed values.
    let mut cells: BTreeMap<(String, String, &'static str, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        let mut push = |probe: &'static str, v: f64| {
            cells
                .entry((r.task.clone(), r.method.as_str().into(), probe, r.residual_dim))
                .or_default()
                .push(v);
        };
        push("B", r.b);
        push("C_pos", r.c_pos);
        push("C_neg", r.c_neg);
        if let Some(v) = r.r_neg {
            push("R_neg", v);
        }
    }
    let mut out = Curves::new();
    for ((task, method, probe, dim), vals) in cells {
        let s = summarize(&vals);
        out.entry(task)
            .or_default()
            .entry(method)
            .or_default()
            .entry(probe.into())
            .or_default()
            .push(CurvePoint {
                residual_dim: dim,
                mean: s.mean,
                std: s.std,
                n: vals.len(),
            });
    }
    out
}

fn records_csv(records: &[ResultRecord]) -> String {
    let mut out = String::from(
        "config_hash,task,method,residual_dim,seed,B,C_pos,C_neg,C_neg_std,R_neg,R_neg_std,cc_metric,mi_metric,wall_time_s\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.config_hash,
            r.task,
            r.method.as_str(),
            r.residual_dim,
            r.seed,
            fmt(r.b),
            fmt(r.c_pos),
            fmt(r.c_neg),
            fmt(r.c_neg_std),
            fmt_opt(r.r_neg),
            fmt_opt(r.r_neg_std),
            fmt(r.cc_metric),
            fmt(r.mi_metric),
            fmt(r.wall_time_s),
        ));
    }
    out
}

pub fn write_report(records: &[ResultRecord], out_dir: &Path) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(CoreError::InvalidConfig(
            "report needs at least one record".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    let mut files = Vec::new();

    let mut by_task: BTreeMap<&str, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(&r.task).or_default().push(r);
    }
    for (label, group) in &by_task {
        let t1 = out_dir.join(format!("table1_{label}.csv"));
        write_file(&t1, &table1(group))?;
        files.push(t1);
        let t3 = out_dir.join(format!("table3_{label}.csv"));
        write_file(&t3, &table3(group))?;
        files.push(t3);
    }

    let curves_path = out_dir.join("curves.json");
    let payload = serde_json::to_string_pretty(&curves(records))
        .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    write_file(&curves_path, &payload)?;
    files.push(curves_path);

    let records_path = out_dir.join("records.csv");
    write_file(&records_path, &records_csv(records))?;
    files.push(records_path);

    Ok(ReportFiles { files })
}
