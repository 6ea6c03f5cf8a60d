//! CSV and JSON file formats.
//!
//! Power series: `timestamp,value` with RFC 3339 timestamps at a fixed step.
//! Feature tables: `id,<col>...[,label]`; a trailing column named `label`
//! marks the label holder's table.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::{DateTime, SecondsFormat, Utc};
use num_bigint::BigUint;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fedgrid_core::data::{FeatureTable, PowerSeries};
use fedgrid_core::paillier::{Keypair, PrivateKey, PublicKey};

use crate::error::{AppError, Result};

pub const LABEL_COLUMN: &str = "label";

fn data_err(path: &Path, msg: impl std::fmt::Display) -> AppError {
    AppError::Data(format!("{}: {msg}", path.display()))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| data_err(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_cell(path: &Path, line: u64, column: &str, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| data_err(path, format!("line {line}, column '{column}': cannot parse '{cell}'")))?;
    if !v.is_finite() {
        return Err(data_err(path, format!("line {line}, column '{column}': non-finite value")));
    }
    Ok(v)
}

fn line_of(rec: &csv::StringRecord, fallback: usize) -> u64 {
    rec.position().map_or(fallback as u64 + 2, |p| p.line())
}

pub fn timestamp_string(secs: i64) -> String {
    DateTime::<Utc>::from_timestamp(secs, 0)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| secs.to_string())
}

pub fn read_series(path: &Path) -> Result<PowerSeries> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| data_err(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "timestamp" || &headers[1] != "value" {
        return Err(data_err(path, "header must be 'timestamp,value'"));
    }
    let mut stamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        let line = line_of(&rec, i);
        let ts = DateTime::parse_from_rfc3339(&rec[0]).map_err(|_| {
            data_err(path, format!("line {line}, column 'timestamp': cannot parse '{}'", &rec[0]))
        })?;
        stamps.push((line, ts.timestamp()));
        values.push(parse_cell(path, line, "value", &rec[1])?);
    }
    if stamps.len() < 2 {
        return Err(data_err(path, "a series needs at least two rows"));
    }
    let step = stamps[1].1 - stamps[0].1;
    if step <= 0 {
        return Err(data_err(path, format!("line {}: timestamps must increase", stamps[1].0)));
    }
    for w in stamps.windows(2) {
        if w[1].1 - w[0].1 != step {
            return Err(data_err(path, format!("line {}: step differs from {step} s", w[1].0)));
        }
    }
    Ok(PowerSeries {
        start: stamps[0].1,
        step_secs: step,
        values,
    })
}

pub fn write_series(path: &Path, series: &PowerSeries) -> Result<()> {
    let mut out = String::from("timestamp,value\n");
    for (i, v) in series.values.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", timestamp_string(series.timestamp(i))));
    }
    write_text(path, &out)
}

pub fn read_table(path: &Path) -> Result<FeatureTable> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| data_err(path, e))?.clone();
    if headers.is_empty() || &headers[0] != "id" {
        return Err(data_err(path, "first column must be 'id'"));
    }
    let has_label = headers.len() > 1 && &headers[headers.len() - 1] == LABEL_COLUMN;
    let feat_end = if has_label { headers.len() - 1 } else { headers.len() };
    let columns: Vec<String> = headers.iter().take(feat_end).skip(1).map(String::from).collect();
    if columns.is_empty() {
        return Err(data_err(path, "no feature columns"));
    }
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        let line = line_of(&rec, i);
        if rec.len() != headers.len() {
            return Err(data_err(
                path,
                format!("line {line}: expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| data_err(path, format!("line {line}, column 'id': cannot parse '{}'", &rec[0])))?;
        if !seen.insert(id) {
            return Err(data_err(path, format!("line {line}: duplicate id {id}")));
        }
        ids.push(id);
        let row = (1..feat_end)
            .map(|j| parse_cell(path, line, &headers[j], &rec[j]))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
        if has_label {
            labels.push(parse_cell(path, line, LABEL_COLUMN, &rec[feat_end])?);
        }
    }
    FeatureTable::new(ids, columns, rows, has_label.then_some(labels)).map_err(|e| data_err(path, e))
}

pub fn write_table(path: &Path, table: &FeatureTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(table.columns.iter().cloned());
    if table.labels.is_some() {
        header.push(LABEL_COLUMN.into());
    }
    let csv_err = |e: csv::Error| AppError::Data(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in table.rows.iter().enumerate() {
        let mut rec = vec![table.ids[i].to_string()];
        rec.extend(row.iter().map(f64::to_string));
        if let Some(l) = &table.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::Data(e.to_string()))?;
    fs::write(path, bytes).map_err(AppError::io(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    fs::write(path, text).map_err(AppError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, e))
}

fn b64(x: &BigUint) -> String {
    B64.encode(x.to_bytes_be())
}

fn unb64(path: &Path, field: &str, s: &str) -> Result<BigUint> {
    let bytes = B64
        .decode(s)
        .map_err(|e| data_err(path, format!("field '{field}': {e}")))?;
    Ok(BigUint::from_bytes_be(&bytes))
}

/// Public key file: base64 big-endian `n` and `g`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PublicKeyFile {
    n: String,
    g: String,
}

/// Private key file: base64 big-endian `lambda` and `mu`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrivateKeyFile {
    lambda: String,
    mu: String,
}

pub fn write_public_key(path: &Path, pk: &PublicKey) -> Result<()> {
    write_json(path, &PublicKeyFile { n: b64(pk.n()), g: b64(pk.g()) })
}

pub fn write_private_key(path: &Path, kp: &Keypair) -> Result<()> {
    write_json(
        path,
        &PrivateKeyFile {
            lambda: b64(kp.private.lambda()),
            mu: b64(kp.private.mu()),
        },
    )
}

pub fn read_public_key(path: &Path) -> Result<PublicKey> {
    let f: PublicKeyFile = read_json(path)?;
    PublicKey::from_parts(unb64(path, "n", &f.n)?, unb64(path, "g", &f.g)?).map_err(|e| data_err(path, e))
}

pub fn read_private_key(path: &Path) -> Result<PrivateKey> {
    let f: PrivateKeyFile = read_json(path)?;
    Ok(PrivateKey::from_parts(
        unb64(path, "lambda", &f.lambda)?,
        unb64(path, "mu", &f.mu)?,
    ))
}
