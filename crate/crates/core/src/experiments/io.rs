//! JSON and CSV artifacts.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::optim::RunRecord;

use super::runners::{BalanceResult, SweepResult};

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| LabError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| LabError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_run_json(record: &RunRecord, path: &Path) -> Result<()> {
    write_json(record, path)
}

pub fn load_run_json(path: &Path) -> Result<RunRecord> {
    read_json(path)
}

fn cell<T: Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let io = |e| LabError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{header}").map_err(io)?;
    for row in rows {
        writeln!(f, "{row}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// One row per recorded iteration (loss points and snapshots merged);
/// cells are empty where a quantity was not recorded at that iteration.
pub fn write_run_csv(record: &RunRecord, norm_key: &str, path: &Path) -> Result<()> {
    #[derive(Default)]
    struct Row {
        loss: Option<f64>,
        clipped: Option<bool>,
        trace: Option<f64>,
        frobenius: Option<f64>,
        spectral: Option<f64>,
        norm: Option<f64>,
    }
    let mut rows: BTreeMap<u64, Row> = BTreeMap::new();
    for l in &record.loss_curve {
        let r = rows.entry(l.iteration).or_default();
        r.loss = Some(l.loss);
        r.clipped = Some(l.clipped);
    }
    for s in &record.snapshots {
        let r = rows.entry(s.iteration).or_default();
        r.trace = Some(s.trace);
        r.frobenius = Some(s.frobenius);
        r.spectral = Some(s.spectral);
        r.norm = s.norms.get(norm_key).copied();
    }
    let lines: Vec<String> = rows
        .iter()
        .map(|(it, r)| {
            let test = if *it == record.iterations { record.test_risk } else { None };
            format!(
                "{it},{},{},{},{},{},{},{}",
                cell(r.loss),
                cell(r.clipped.map(u8::from)),
                cell(r.trace),
                cell(r.frobenius),
                cell(r.spectral),
                cell(r.norm),
                cell(test)
            )
        })
        .collect();
    write_lines(
        path,
        &format!("iteration,loss,clipped,trace,frobenius,spectral,{norm_key},test_risk"),
        &lines,
    )
}

/// `sweep.csv`: one row per (method, learning rate, seed).
pub fn export_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let lines: Vec<String> = result
        .rows
        .iter()
        .map(|r| {
            let check = |c: Option<bool>| cell(c.map(u8::from));
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.mode_name(),
                r.lr_index,
                r.learning_rate,
                r.seed,
                r.status_name(),
                u8::from(r.converged),
                r.iterations,
                r.clip_count,
                cell(r.final_loss),
                cell(r.test_risk),
                cell(r.trace),
                cell(r.frobenius),
                cell(r.spectral),
                cell(r.alignment),
                cell(r.norm),
                cell(r.balancedness),
                check(r.verdict.as_ref().map(|v| v.trace_check.passed)),
                check(r.verdict.as_ref().map(|v| v.spectral_check.passed)),
            )
        })
        .collect();
    write_lines(
        path,
        &format!(
            "mode,lr_index,learning_rate,seed,status,converged,iterations,clip_count,final_loss,\
             test_risk,trace,frobenius,spectral,alignment,{},balancedness,trace_check,spectral_check",
            result.norm_key
        ),
        &lines,
    )
}

pub fn export_balance_csv(result: &BalanceResult, path: &Path) -> Result<()> {
    let lines: Vec<String> = result
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.r0,
                r.seed,
                r.mode_name(),
                r.learning_rate,
                u8::from(r.converged),
                r.iterations,
                r.init_balancedness,
                r.init_balancedness_l2,
                cell(r.final_balancedness),
                cell(r.final_balancedness_l2),
                cell(r.test_risk),
            )
        })
        .collect();
    write_lines(
        path,
        "r0,seed,mode,learning_rate,converged,iterations,init_r,init_r_l2,final_r,final_r_l2,test_risk",
        &lines,
    )
}
