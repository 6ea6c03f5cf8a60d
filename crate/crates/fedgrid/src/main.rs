use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedgrid::config::load_config;
use fedgrid::error::{AppError, Result};
use fedgrid::io::{
    read_table, write_json, write_private_key, write_public_key, write_series, write_table,
    write_text,
};
use fedgrid::metrics::{compare, parse_metrics, write_metrics};
use fedgrid::run::{predict_sb, run_experiment};
use fedgrid::trace::{audit_lines, read_trace, write_trace};
use fedgrid_core::data::{gen_stations, gen_vertical_case, CrossSignal, PowerProfile};
use fedgrid_core::paillier::Keypair;
use fedgrid_core::seed;
use fedgrid_core::transport::{LeakProbe, Protocol};

#[derive(Parser)]
#[command(name = "fedgrid", version, about = "Federated learning over Paillier encryption")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a Paillier keypair (writes <out>.pub.json and <out>.priv.json).
    Keygen {
        #[arg(long, default_value_t = 1024)]
        bits: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic data sets as CSV.
    GenData {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Horizontal federated LSTM training.
    HflTrain(TrainArgs),
    /// Vertical federated ridge regression.
    VflrTrain(TrainArgs),
    /// Vertical federated gradient-boosted trees.
    SbTrain(TrainArgs),
    /// Collaborative prediction with a trained tree model.
    SbPredict {
        /// Directory written by sb-train --model-out.
        #[arg(long)]
        model: PathBuf,
        /// Party B's rows (id, features, optional label).
        #[arg(long)]
        input: PathBuf,
        /// Party A's rows for the same ids.
        #[arg(long)]
        input_a: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Compare the final losses of two metrics files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an exported trace against a protocol's whitelist.
    Audit {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
    },
}

#[derive(Subcommand)]
enum GenKind {
    /// One hourly power series per station.
    Power {
        #[arg(long, default_value_t = 3)]
        stations: usize,
        #[arg(long, default_value_t = 24 * 14)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Aligned feature tables for parties A and B (B holds the label).
    Vertical {
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        n_a: usize,
        #[arg(long, default_value_t = 5)]
        n_b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Hfl,
    Vflr,
    Secureboost,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    metrics_out: PathBuf,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Include full payloads in the trace.
    #[arg(long)]
    trace_full: bool,
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config field, e.g. --set hfl.engine.drop_prob=0.4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, hide = true, value_name = "EPOCH", num_args = 0..=1, default_missing_value = "2")]
    inject_leak: Option<usize>,
}

fn train(args: &TrainArgs, want: &str) -> Result<()> {
    let mut cfg = load_config(&args.config, &args.overrides)?;
    if cfg.protocol.as_str() != want {
        return Err(AppError::Config(format!(
            "config protocol is '{}', this command runs '{want}'",
            cfg.protocol.as_str()
        )));
    }
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    let leak = args.inject_leak.map_or(LeakProbe::Off, LeakProbe::AtEpoch);
    let out = run_experiment(&cfg, leak)?;
    write_metrics(&args.metrics_out, &out.metrics_csv, &out.meta)?;
    if let Some(p) = &args.trace_out {
        write_trace(p, &out.trace, args.trace_full)?;
    }
    if let Some(p) = &args.model_out {
        out.artifact.save(p)?;
    }
    if !out.audit.passed() {
        let lines: Vec<String> = out
            .audit
            .violations
            .iter()
            .map(|v| format!("seq {} {}->{} {:?}: {:?}", v.seq, v.from, v.to, v.kind, v.reason))
            .collect();
        return Err(AppError::Audit(lines.join("; ")));
    }
    eprintln!(
        "{}: {} rows, final loss {}",
        want,
        out.meta.rows,
        out.meta.final_loss.map_or("n/a".into(), |v| v.to_string())
    );
    Ok(())
}

fn gen_data(kind: &GenKind) -> Result<()> {
    match kind {
        GenKind::Power {
            stations,
            length,
            seed,
            out_dir,
        } => {
            let profile = PowerProfile {
                length: *length,
                ..PowerProfile::default()
            };
            for (i, s) in gen_stations(&profile, *stations, *seed)?.iter().enumerate() {
                write_series(&out_dir.join(format!("station{}.csv", i + 1)), s)?;
            }
        }
        GenKind::Vertical {
            samples,
            n_a,
            n_b,
            seed,
            out_dir,
        } => {
            let (a, b) = gen_vertical_case(*samples, *n_a, *n_b, &CrossSignal::default(), *seed)?;
            std::fs::create_dir_all(out_dir).map_err(AppError::io(out_dir))?;
            write_table(&out_dir.join("party_a.csv"), &a)?;
            write_table(&out_dir.join("party_b.csv"), &b)?;
        }
    }
    Ok(())
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = out.write_all(b"\n");
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Keygen { bits, out, seed: s } => {
            let kp = Keypair::generate(bits, &mut seed::rng(s, &[seed::tags::KEYGEN]))?;
            let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            write_public_key(&out.with_file_name(format!("{name}.pub.json")), &kp.public)?;
            write_private_key(&out.with_file_name(format!("{name}.priv.json")), &kp)
        }
        Cmd::GenData { kind } => gen_data(&kind),
        Cmd::HflTrain(a) => train(&a, "hfl"),
        Cmd::VflrTrain(a) => train(&a, "vflr"),
        Cmd::SbTrain(a) => train(&a, "secureboost"),
        Cmd::SbPredict {
            model,
            input,
            input_a,
            out,
            trace_out,
        } => {
            let rows_b = read_table(&input)?;
            let rows_a = read_table(&input_a)?;
            let p = predict_sb(&model, &rows_b, &rows_a)?;
            let mut csv = String::from("id,prediction\n");
            for (id, v) in p.ids.iter().zip(&p.values) {
                csv.push_str(&format!("{id},{v}\n"));
            }
            match out {
                Some(path) => write_text(&path, &csv)?,
                None => emit(&csv),
            }
            if let Some(path) = trace_out {
                write_trace(&path, &p.trace, false)?;
            }
            if let Some(m) = p.mse {
                eprintln!("mse {m}");
            }
            Ok(())
        }
        Cmd::Compare { a, b, out } => {
            let read = |p: &Path| {
                std::fs::read_to_string(p).map_err(|e| AppError::Data(format!("{}: {e}", p.display())))
            };
            let report = compare(&parse_metrics(&read(&a)?)?, &parse_metrics(&read(&b)?)?)?;
            match out {
                Some(path) => write_json(&path, &report),
                None => {
                    emit(&serde_json::to_string_pretty(&report).expect("report serializes"));
                    Ok(())
                }
            }
        }
        Cmd::Audit { trace, protocol } => {
            let lines = read_trace(&trace)?;
            let protocol = match protocol {
                ProtocolArg::Hfl => Protocol::Hfl,
                ProtocolArg::Vflr => Protocol::Vflr,
                ProtocolArg::Secureboost => Protocol::SecureBoost,
            };
            let findings = audit_lines(&lines, protocol);
            if findings.is_empty() {
                emit(&format!("audit passed: {} envelopes", lines.len()));
                return Ok(());
            }
            let text: Vec<String> = findings
                .iter()
                .map(|f| format!("seq {} {}->{} {:?}: {}", f.seq, f.from, f.to, f.kind, f.reason))
                .collect();
            emit(&text.join("\n"));
            Err(AppError::Audit(format!("{} finding(s)", findings.len())))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
