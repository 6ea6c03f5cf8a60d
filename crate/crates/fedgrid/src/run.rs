//! End-to-end experiment runs from a validated config.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use fedgrid_core::data::{
    gen_stations, gen_vertical_case, standardize_series, window, FeatureTable, PowerSeries,
};
use fedgrid_core::hfl::{hfl_bus, hfl_init, hfl_train};
use fedgrid_core::learners::{Dataset, LstmConfig, LstmModel, ModelParams};
use fedgrid_core::secureboost::{
    sb_bus, sb_init, sb_predict, sb_train, BoostModel, SbPredictorA, SplitLookup,
};
use fedgrid_core::transport::{audit, AuditReport, AuditTrace, Bus, LeakProbe};
use fedgrid_core::vflr::{vflr_bus, vflr_init, vflr_train};

use crate::config::{ExperimentConfig, HflSection, SbSection, SeriesSource, TableSource, VflrSection};
use crate::error::{AppError, Result};
use crate::io::{read_json, read_series, read_table, write_json};
use crate::metrics::{hfl_csv, sb_csv, vflr_csv, MetricsMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HflCheckpoint {
    pub config_hash: String,
    pub model: LstmConfig,
    pub params: ModelParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearShare {
    pub config_hash: String,
    pub columns: Vec<String>,
    pub theta: Vec<f64>,
}

pub enum Artifact {
    Hfl(HflCheckpoint),
    Vflr { a: LinearShare, b: LinearShare },
    Sb { model: BoostModel, lookup_a: SplitLookup },
}

pub const VFLR_A_FILE: &str = "party_a.json";
pub const VFLR_B_FILE: &str = "party_b.json";
pub const SB_B_FILE: &str = "model_b.json";
pub const SB_A_FILE: &str = "lookup_a.json";

impl Artifact {
    /// HFL writes one file; the vertical protocols write one file per
    /// party into the directory `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Artifact::Hfl(c) => write_json(path, c),
            Artifact::Vflr { a, b } => {
                write_json(&path.join(VFLR_A_FILE), a)?;
                write_json(&path.join(VFLR_B_FILE), b)
            }
            Artifact::Sb { model, lookup_a } => {
                write_json(&path.join(SB_B_FILE), model)?;
                write_json(&path.join(SB_A_FILE), lookup_a)
            }
        }
    }
}

pub struct RunOutput {
    pub metrics_csv: String,
    pub meta: MetricsMeta,
    pub trace: AuditTrace,
    pub audit: AuditReport,
    pub artifact: Artifact,
}

/// Runs the configured protocol. `leak` turns on the plaintext negative
/// control, which also disables bus-side enforcement so the audit sees it.
pub fn run_experiment(cfg: &ExperimentConfig, leak: LeakProbe) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let start = Instant::now();
    let mut out = match (&cfg.hfl, &cfg.vflr, &cfg.secureboost) {
        (Some(h), _, _) => run_hfl(h, &hash, leak)?,
        (_, Some(v), _) => run_vflr(v, &hash, leak)?,
        (_, _, Some(s)) => run_sb(s, &hash, leak)?,
        _ => return Err(AppError::Config("no protocol section".into())),
    };
    out.meta.protocol = cfg.protocol;
    out.meta.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(out)
}

fn meta(hash: &str, rows: usize, converged: Option<bool>, final_loss: Option<f64>) -> MetricsMeta {
    MetricsMeta {
        run_id: hash[..16].to_string(),
        protocol: crate::config::ProtocolName::Hfl,
        config_hash: hash.to_string(),
        rows,
        converged,
        final_loss,
        wall_clock_secs: 0.0,
    }
}

fn guarded(bus: Bus, leak: LeakProbe) -> Bus {
    if leak == LeakProbe::Off {
        bus
    } else {
        bus.unchecked()
    }
}

/// Each party standardizes and windows its own series.
pub fn hfl_datasets(section: &HflSection) -> Result<Vec<Dataset>> {
    let (series, keep): (Vec<PowerSeries>, _) = match &section.data {
        SeriesSource::Synthetic {
            parties,
            profile,
            samples_per_party,
            seed,
        } => (gen_stations(profile, *parties, *seed)?, *samples_per_party),
        SeriesSource::Csv {
            paths,
            samples_per_party,
        } => (
            paths.iter().map(|p| read_series(p)).collect::<Result<_>>()?,
            *samples_per_party,
        ),
    };
    let m = &section.model;
    series
        .iter()
        .map(|s| {
            let (z, _) = standardize_series(&s.values);
            let mut w = window(&z, m.input_window, m.horizon)?;
            if let Some(n) = keep {
                if n > w.len() {
                    return Err(AppError::Data(format!(
                        "samples_per_party = {n} but a series yields only {} windows",
                        w.len()
                    )));
                }
                w.truncate(n);
            }
            Ok(w.to_dataset())
        })
        .collect()
}

fn run_hfl(section: &HflSection, hash: &str, leak: LeakProbe) -> Result<RunOutput> {
    let datasets = hfl_datasets(section)?;
    let learner = LstmModel::new(section.model)?;
    let cfg = &section.engine;
    let n = datasets.len();
    let mut bus = guarded(hfl_bus(n, cfg)?, leak);
    let (mut parties, mut server) = hfl_init(&learner, datasets, cfg, &mut bus)?;
    let outcome = hfl_train(&learner, &mut parties, &mut server, cfg, &mut bus, leak)?;
    let report = audit(bus.trace(), bus.whitelist(), &outcome.secrets);
    let final_loss = outcome.reports.iter().rev().find_map(|r| r.avg_loss);
    Ok(RunOutput {
        metrics_csv: hfl_csv(&outcome.reports, n),
        meta: meta(hash, outcome.reports.len(), Some(outcome.converged), final_loss),
        trace: bus.into_trace(),
        audit: report,
        artifact: Artifact::Hfl(HflCheckpoint {
            config_hash: hash.to_string(),
            model: section.model,
            params: outcome.params,
        }),
    })
}

pub fn vertical_tables(source: &TableSource, ablate_a: bool) -> Result<(FeatureTable, FeatureTable)> {
    let (a, b) = match source {
        TableSource::Synthetic {
            n_samples,
            n_a,
            n_b,
            signal,
            seed,
        } => gen_vertical_case(*n_samples, *n_a, *n_b, signal, *seed)?,
        TableSource::Csv { a, b } => (read_table(a)?, read_table(b)?),
    };
    if b.labels.is_none() {
        return Err(AppError::Data("party B's table has no label column".into()));
    }
    if a.labels.is_some() {
        return Err(AppError::Data("party A's table must not carry labels".into()));
    }
    Ok((if ablate_a { a.zeroed() } else { a }, b))
}

fn run_vflr(section: &VflrSection, hash: &str, leak: LeakProbe) -> Result<RunOutput> {
    let (ta, tb) = vertical_tables(&section.data, section.ablate_a)?;
    let cfg = &section.engine;
    let mut bus = guarded(vflr_bus(), leak);
    let (mut a, mut b, c) = vflr_init(&ta, &tb, cfg, &mut bus)?;
    let outcome = vflr_train(&mut a, &mut b, &c, cfg, &mut bus, leak)?;
    let report = audit(bus.trace(), bus.whitelist(), &outcome.secrets);
    let final_loss = outcome.history.last().map(|h| h.train_mse);
    let mut b_cols = tb.columns.clone();
    b_cols.push("bias".into());
    Ok(RunOutput {
        metrics_csv: vflr_csv(&outcome.history),
        meta: meta(hash, outcome.history.len(), Some(outcome.converged), final_loss),
        trace: bus.into_trace(),
        audit: report,
        artifact: Artifact::Vflr {
            a: LinearShare {
                config_hash: hash.to_string(),
                columns: ta.columns.clone(),
                theta: outcome.theta_a,
            },
            b: LinearShare {
                config_hash: hash.to_string(),
                columns: b_cols,
                theta: outcome.theta_b,
            },
        },
    })
}

fn run_sb(section: &SbSection, hash: &str, leak: LeakProbe) -> Result<RunOutput> {
    let (ta, tb) = vertical_tables(&section.data, section.ablate_a)?;
    let cfg = &section.engine;
    let mut bus = guarded(sb_bus(), leak);
    let (mut a, mut b) = sb_init(&ta, &tb, cfg, &mut bus)?;
    let outcome = sb_train(&mut a, &mut b, cfg, &mut bus, leak)?;
    let report = audit(bus.trace(), bus.whitelist(), &outcome.secrets);
    Ok(RunOutput {
        metrics_csv: sb_csv(&outcome.train_mse),
        meta: meta(hash, outcome.train_mse.len(), None, outcome.train_mse.last().copied()),
        trace: bus.into_trace(),
        audit: report,
        artifact: Artifact::Sb {
            model: outcome.model,
            lookup_a: a.lookup.clone(),
        },
    })
}

pub struct Prediction {
    pub ids: Vec<u64>,
    pub values: Vec<f64>,
    /// MSE against B's labels, when the input carries them.
    pub mse: Option<f64>,
    pub trace: AuditTrace,
}

/// Collaborative prediction: B's model file, A's lookup file, and each
/// party's own rows.
pub fn predict_sb(model_dir: &Path, rows_b: &FeatureTable, rows_a: &FeatureTable) -> Result<Prediction> {
    let model: BoostModel = read_json(&model_dir.join(SB_B_FILE))?;
    let lookup: SplitLookup = read_json(&model_dir.join(SB_A_FILE))?;
    let a = SbPredictorA::new(lookup, rows_a.clone());
    let mut bus = sb_bus();
    let values = sb_predict(&model, &a, rows_b, &mut bus)?;
    let mse = rows_b.labels.as_ref().map(|y| {
        y.iter().zip(&values).map(|(t, p)| (t - p) * (t - p)).sum::<f64>() / y.len().max(1) as f64
    });
    Ok(Prediction {
        ids: rows_b.ids.clone(),
        values,
        mse,
        trace: bus.into_trace(),
    })
}
