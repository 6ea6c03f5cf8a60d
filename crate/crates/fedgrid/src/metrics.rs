//! Metrics CSV rendering, the JSON sidecar, and run comparison.
//!
//! CSVs hold only deterministic columns; wall-clock time lives in the
//! sidecar so identical seeds give byte-identical CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedgrid_core::hfl::RoundReport;
use fedgrid_core::vflr::VflrEpoch;

use crate::config::ProtocolName;
use crate::error::{AppError, Result};
use crate::io::{write_json, write_text};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,loss_party1..loss_partyK,avg_loss,arrivals`
pub fn hfl_csv(reports: &[RoundReport], parties: usize) -> String {
    let mut out = String::from("epoch");
    for k in 1..=parties {
        let _ = write!(out, ",loss_party{k}");
    }
    out.push_str(",avg_loss,arrivals\n");
    for r in reports {
        let _ = write!(out, "{}", r.epoch);
        for k in 0..parties {
            let _ = write!(out, ",{}", opt(r.party_losses.get(k).copied().flatten()));
        }
        let arrivals: Vec<String> = r.arrivals.iter().map(|a| (a + 1).to_string()).collect();
        let _ = writeln!(out, ",{},{}", opt(r.avg_loss), arrivals.join(";"));
    }
    out
}

/// `epoch,delta_theta_a,delta_theta_b,train_mse`
pub fn vflr_csv(history: &[VflrEpoch]) -> String {
    let mut out = String::from("epoch,delta_theta_a,delta_theta_b,train_mse\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            h.epoch, h.delta_theta_a, h.delta_theta_b, h.train_mse
        );
    }
    out
}

/// `tree,train_mse`
pub fn sb_csv(train_mse: &[f64]) -> String {
    let mut out = String::from("tree,train_mse\n");
    for (t, m) in train_mse.iter().enumerate() {
        let _ = writeln!(out, "{},{m}", t + 1);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMeta {
    pub run_id: String,
    pub protocol: ProtocolName,
    pub config_hash: String,
    pub rows: usize,
    pub converged: Option<bool>,
    pub final_loss: Option<f64>,
    pub wall_clock_secs: f64,
}

pub fn meta_path(metrics: &Path) -> PathBuf {
    let mut name = metrics.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    metrics.with_file_name(name)
}

pub fn write_metrics(path: &Path, csv: &str, meta: &MetricsMeta) -> Result<()> {
    write_text(path, csv)?;
    write_json(&meta_path(path), meta)
}

/// A metrics CSV read back for comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub protocol: ProtocolName,
    /// Loss column (`avg_loss` or `train_mse`), empty cells skipped.
    pub losses: Vec<f64>,
}

pub fn parse_metrics(text: &str) -> Result<MetricsTable> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| AppError::Data("empty metrics file".into()))?
        .split(',')
        .collect();
    let (protocol, col) = match header.first().copied() {
        Some("epoch") if header.contains(&"avg_loss") => {
            (ProtocolName::Hfl, header.iter().position(|h| *h == "avg_loss"))
        }
        Some("epoch") => (ProtocolName::Vflr, header.iter().position(|h| *h == "train_mse")),
        Some("tree") => (ProtocolName::Secureboost, header.iter().position(|h| *h == "train_mse")),
        _ => (ProtocolName::Hfl, None),
    };
    let col = col.ok_or_else(|| AppError::Data("unrecognized metrics header".into()))?;
    let mut losses = Vec::new();
    for (i, line) in lines.enumerate() {
        let cell = line.split(',').nth(col).unwrap_or("");
        if cell.is_empty() {
            continue;
        }
        losses.push(
            cell.parse()
                .map_err(|_| AppError::Data(format!("line {}: cannot parse '{cell}'", i + 2)))?,
        );
    }
    Ok(MetricsTable { protocol, losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub protocol: ProtocolName,
    pub final_a: f64,
    pub final_b: f64,
    /// `final_b / final_a`
    pub ratio: f64,
    pub rows_a: usize,
    pub rows_b: usize,
    pub a_lower: bool,
}

pub fn compare(a: &MetricsTable, b: &MetricsTable) -> Result<CompareReport> {
    if a.protocol != b.protocol {
        return Err(AppError::Data(format!(
            "cannot compare {} metrics with {} metrics",
            a.protocol.as_str(),
            b.protocol.as_str()
        )));
    }
    let last = |t: &MetricsTable| {
        t.losses
            .last()
            .copied()
            .ok_or_else(|| AppError::Data("metrics contain no loss values".into()))
    };
    let (fa, fb) = (last(a)?, last(b)?);
    Ok(CompareReport {
        protocol: a.protocol,
        final_a: fa,
        final_b: fb,
        ratio: if fa == fb { 1.0 } else { fb / fa },
        rows_a: a.losses.len(),
        rows_b: b.losses.len(),
        a_lower: fa < fb,
    })
}
