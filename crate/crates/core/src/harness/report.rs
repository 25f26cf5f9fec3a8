//! Result files: one accuracy CSV per seed and a key-value summary.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so parsing
//! a file gives back the exact values that were written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{mean_std, AccuracyMatrix};
use super::run::{RunResult, SweepCell};
use crate::error::{OclError, Result};

pub const CSV_HEADER: &str = "task_i,task_j,accuracy";
pub const SUMMARY_FILE: &str = "summary.txt";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| OclError::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| OclError::io(path, e))
}

pub fn accuracy_csv(m: &AccuracyMatrix) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (i, row) in m.rows().iter().enumerate() {
        for (j, a) in row.iter().enumerate() {
            writeln!(out, "{},{},{}", i + 1, j + 1, a).expect("writing to a String");
        }
    }
    out
}

/// Task indices in the file are 1-based.
pub fn write_accuracy_csv(m: &AccuracyMatrix, path: &Path) -> Result<()> {
    write_file(path, &accuracy_csv(m))
}

pub fn parse_accuracy_csv(text: &str) -> Result<AccuracyMatrix> {
    let bad = |m: String| OclError::InvalidConfig(format!("accuracy csv: {m}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.trim().split(',').collect();
        let [i, j, a] = parts[..] else {
            return Err(bad(format!("malformed line `{line}`")));
        };
        let parse_idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad index `{s}`")))
        };
        let (i, j) = (parse_idx(i)?, parse_idx(j)?);
        let a: f64 = a.parse().map_err(|_| bad(format!("bad accuracy `{a}`")))?;
        if cells.insert((i, j), a).is_some() {
            return Err(bad(format!("cell ({i},{j}) repeated")));
        }
    }
    let tasks = cells.keys().map(|&(i, _)| i).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(tasks);
    for i in 1..=tasks {
        let row = (1..=i)
            .map(|j| cells.remove(&(i, j)).ok_or(OclError::IncompleteRow(i)))
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if let Some((i, j)) = cells.keys().next() {
        return Err(bad(format!("cell ({i},{j}) outside the lower triangle")));
    }
    AccuracyMatrix::from_rows(rows)
}

pub fn read_accuracy_csv(path: &Path) -> Result<AccuracyMatrix> {
    parse_accuracy_csv(&read_file(path)?)
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

pub fn csv_name(seed: u64) -> String {
    format!("accuracy_seed_{seed}.csv")
}

/// Summary lines: the config under `config.`, then per-seed final values,
/// then the aggregates across seeds.
pub fn summary_text(result: &RunResult) -> String {
    let mut out = String::from("# run summary\n");
    for (k, v) in result.config.entries() {
        writeln!(out, "config.{k} = {v}").expect("writing to a String");
    }
    writeln!(out, "tasks = {}", result.num_tasks()).expect("writing to a String");
    for s in &result.seeds {
        writeln!(out, "seed.{}.final_accuracy = {}", s.seed, s.final_accuracy)
            .expect("writing to a String");
        writeln!(
            out,
            "seed.{}.final_forgetting = {}",
            s.seed,
            show(s.final_forgetting)
        )
        .expect("writing to a String");
        writeln!(out, "seed.{}.examples_seen = {}", s.seed, s.examples_seen)
            .expect("writing to a String");
    }
    for (k, v) in [
        ("final_accuracy.mean", Some(result.accuracy_mean)),
        ("final_accuracy.std", Some(result.accuracy_std)),
        ("final_forgetting.mean", result.forgetting_mean),
        ("final_forgetting.std", result.forgetting_std),
    ] {
        writeln!(out, "{k} = {}", show(v)).expect("writing to a String");
    }
    out
}

pub fn parse_summary(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line.split_once('=').ok_or_else(|| {
            OclError::InvalidConfig(format!("summary line `{line}` is not key = value"))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Writes `summary.txt` and one accuracy CSV per seed into `dir`.
pub fn emit_report(result: &RunResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.seeds.is_empty() {
        return Err(OclError::EmptyResults);
    }
    std::fs::create_dir_all(dir).map_err(|e| OclError::io(dir, e))?;
    let mut written = Vec::with_capacity(result.seeds.len() + 1);
    for s in &result.seeds {
        let path = dir.join(csv_name(s.seed));
        write_accuracy_csv(&s.matrix, &path)?;
        written.push(path);
    }
    let path = dir.join(SUMMARY_FILE);
    write_file(&path, &summary_text(result))?;
    written.push(path);
    Ok(written)
}

/// One report directory per cell plus a `sweep.csv` table keyed by the axes.
pub fn emit_sweep_report(cells: &[(SweepCell, RunResult)], dir: &Path) -> Result<()> {
    if cells.is_empty() {
        return Err(OclError::EmptyResults);
    }
    std::fs::create_dir_all(dir).map_err(|e| OclError::io(dir, e))?;
    let axis_names: Vec<&str> = cells[0].0.axes.iter().map(|(k, _)| k.as_str()).collect();
    let mut table = String::new();
    for k in &axis_names {
        table.push_str(k);
        table.push(',');
    }
    table.push_str(
        "cell,final_accuracy_mean,final_accuracy_std,final_forgetting_mean,final_forgetting_std\n",
    );
    for (cell, result) in cells {
        emit_report(result, &dir.join(cell.name()))?;
        for (_, v) in &cell.axes {
            table.push_str(v);
            table.push(',');
        }
        writeln!(
            table,
            "{},{},{},{},{}",
            cell.name(),
            result.accuracy_mean,
            result.accuracy_std,
            show(result.forgetting_mean),
            show(result.forgetting_std)
        )
        .expect("writing to a String");
    }
    write_file(&dir.join("sweep.csv"), &table)
}

/// A report directory read back and re-checked.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub dir: PathBuf,
    pub method: String,
    pub optimizer: String,
    pub trick: String,
    pub tasks: usize,
    pub seeds: Vec<u64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
}

/// Reads `dir`, recomputes every per-seed value from the CSVs and the
/// aggregates from the per-seed values, and fails on any disagreement.
pub fn summarize_dir(dir: &Path) -> Result<ReportSummary> {
    let kv = parse_summary(&read_file(&dir.join(SUMMARY_FILE))?)?;
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| OclError::InvalidConfig(format!("summary lacks `{k}`")))
    };
    let num = |k: &str| -> Result<Option<f64>> {
        let v = get(k)?;
        if v == "na" {
            return Ok(None);
        }
        v.parse()
            .map(Some)
            .map_err(|_| OclError::InvalidConfig(format!("summary `{k}` is not a number")))
    };
    let seeds: Vec<u64> = get("config.seeds")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| OclError::InvalidConfig(format!("bad seed `{s}`")))
        })
        .collect::<Result<_>>()?;
    let tasks: usize = get("tasks")?
        .parse()
        .map_err(|_| OclError::InvalidConfig("bad task count".into()))?;
    let mut acc = Vec::with_capacity(seeds.len());
    let mut forg = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let m = read_accuracy_csv(&dir.join(csv_name(s)))?;
        if m.num_tasks() != tasks {
            return Err(OclError::IncompleteRow(m.num_tasks() + 1));
        }
        let a = super::metrics::average_accuracy(&m, tasks)?;
        let f = if tasks >= 2 {
            Some(super::metrics::average_forgetting(&m, tasks)?)
        } else {
            None
        };
        let recorded_a = num(&format!("seed.{s}.final_accuracy"))?;
        let recorded_f = num(&format!("seed.{s}.final_forgetting"))?;
        if recorded_a != Some(a) || recorded_f != f {
            return Err(OclError::InvalidConfig(format!(
                "seed {s}: summary disagrees with its csv"
            )));
        }
        acc.push(a);
        forg.push(f);
    }
    let (accuracy_mean, accuracy_std) = mean_std(&acc);
    let forg: Option<Vec<f64>> = forg.into_iter().collect();
    let (forgetting_mean, forgetting_std) = match forg.map(|f| mean_std(&f)) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    };
    if !close(num("final_accuracy.mean")?, Some(accuracy_mean))
        || !close(num("final_accuracy.std")?, Some(accuracy_std))
        || !close(num("final_forgetting.mean")?, forgetting_mean)
        || !close(num("final_forgetting.std")?, forgetting_std)
    {
        return Err(OclError::InvalidConfig(
            "summary aggregates disagree with per-seed values".into(),
        ));
    }
    Ok(ReportSummary {
        dir: dir.to_path_buf(),
        method: get("config.method")?,
        optimizer: get("config.optimizer")?,
        trick: get("config.trick")?,
        tasks,
        seeds,
        accuracy_mean,
        accuracy_std,
        forgetting_mean,
        forgetting_std,
    })
}
