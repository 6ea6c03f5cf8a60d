use std::path::Path;

use fedgrid::config::{apply_override, canonical, load_config, parse_config, ProtocolName};
use fedgrid::metrics::{compare, hfl_csv, parse_metrics, sb_csv, vflr_csv};
use fedgrid::run::run_experiment;
use fedgrid::trace::{audit_lines, read_trace, trace_lines, write_trace};
use fedgrid::ErrorClass;
use fedgrid_core::hfl::RoundReport;
use fedgrid_core::transport::{LeakProbe, Protocol};

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_configs_parse() {
    for (f, p) in [
        ("hfl.toml", ProtocolName::Hfl),
        ("vflr.toml", ProtocolName::Vflr),
        ("secureboost.toml", ProtocolName::Secureboost),
    ] {
        let cfg = load_config(&configs().join(f), &[]).unwrap();
        assert_eq!(cfg.protocol, p);
        assert_eq!(cfg.hash().len(), 64);
    }
}

const MINIMAL: &str = r#"
protocol = "vflr"
[vflr.data]
source = "synthetic"
n_samples = 40
n_a = 2
n_b = 2
"#;

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let bad = format!("{MINIMAL}\n[vflr.engine]\nlambda = 0.1\nlearning_rate = 0.01\nmax_epochs = 5\ntol = 1e-6\nspeed = 3\n");
    let e = parse_config(&bad, false, &[]).unwrap_err();
    assert_eq!(e.class(), ErrorClass::Config);
    assert!(e.to_string().contains("speed"));

    let e = parse_config(MINIMAL, false, &["vflr.engine.learning_rate=-0.5".into()]).unwrap_err();
    assert_eq!(e.class(), ErrorClass::Config);

    let e = parse_config("protocol = \"hfl\"\n", false, &[]).unwrap_err();
    assert!(e.to_string().contains("[hfl]"));
    let e = parse_config(MINIMAL, false, &["nonsense".into()]).unwrap_err();
    assert_eq!(e.class(), ErrorClass::Config);
}

#[test]
fn overrides_and_hash() {
    let a = parse_config(MINIMAL, false, &[]).unwrap();
    let b = parse_config(MINIMAL, false, &["vflr.data.seed=9".into()]).unwrap();
    assert_ne!(a.hash(), b.hash());
    let mut c = a.clone();
    c.set_seed(9);
    assert_ne!(c.hash(), a.hash());
    assert_eq!(a.hash(), parse_config(MINIMAL, false, &[]).unwrap().hash());

    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(parse_config(&json, true, &[]).unwrap(), a);

    let mut v = serde_json::json!({"x": {"y": 1}});
    apply_override(&mut v, "x.z.w=true").unwrap();
    apply_override(&mut v, "x.name=abc").unwrap();
    assert_eq!(canonical(&v), r#"{"x":{"name":"abc","y":1,"z":{"w":true}}}"#);
    assert!(apply_override(&mut v, "x.y.q=1").is_err());
}

#[test]
fn metrics_csv_shapes_and_compare() {
    let reports = vec![
        RoundReport {
            epoch: 1,
            party_losses: vec![Some(1.5), None],
            avg_loss: Some(1.5),
            arrivals: vec![0],
        },
        RoundReport {
            epoch: 2,
            party_losses: vec![None, None],
            avg_loss: None,
            arrivals: vec![],
        },
    ];
    let csv = hfl_csv(&reports, 2);
    assert_eq!(csv, "epoch,loss_party1,loss_party2,avg_loss,arrivals\n1,1.5,,1.5,1\n2,,,,\n");
    let t = parse_metrics(&csv).unwrap();
    assert_eq!((t.protocol, t.losses.clone()), (ProtocolName::Hfl, vec![1.5]));

    let sb = sb_csv(&[0.5, 0.25]);
    assert_eq!(sb, "tree,train_mse\n1,0.5\n2,0.25\n");
    let s = parse_metrics(&sb).unwrap();
    let same = compare(&s, &s).unwrap();
    assert_eq!(same.ratio, 1.0);
    assert!(!same.a_lower);
    let worse = parse_metrics("tree,train_mse\n1,0.5\n").unwrap();
    let r = compare(&s, &worse).unwrap();
    assert!(r.a_lower && (r.ratio - 2.0).abs() < 1e-15);
    assert_eq!(compare(&s, &t).unwrap_err().class(), ErrorClass::Data);
    assert_eq!(vflr_csv(&[]), "epoch,delta_theta_a,delta_theta_b,train_mse\n");
}

#[test]
fn small_runs_export_auditable_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(
        MINIMAL,
        false,
        &[
            "vflr.engine.key_bits=256".into(),
            "vflr.engine.max_epochs=3".into(),
            "vflr.engine.lambda=0.1".into(),
            "vflr.engine.learning_rate=0.001".into(),
            "vflr.engine.tol=1e-9".into(),
        ],
    )
    .unwrap();
    let out = run_experiment(&cfg, LeakProbe::Off).unwrap();
    assert!(out.audit.passed());
    assert_eq!(out.meta.rows, 3);
    assert_eq!(out.metrics_csv.lines().count(), 4);

    let p = dir.path().join("t.jsonl");
    write_trace(&p, &out.trace, true).unwrap();
    let lines = read_trace(&p).unwrap();
    assert_eq!(lines, trace_lines(&out.trace, true));
    assert!(audit_lines(&lines, Protocol::Vflr).is_empty());
    assert!(!audit_lines(&lines, Protocol::Hfl).is_empty());

    let leaked = run_experiment(&cfg, LeakProbe::AtEpoch(2)).unwrap();
    assert!(!leaked.audit.passed());
    write_trace(&p, &leaked.trace, true).unwrap();
    let findings = audit_lines(&read_trace(&p).unwrap(), Protocol::Vflr);
    assert_eq!(findings.len(), 1);
    assert_eq!(findings[0].seq, leaked.audit.violations[0].seq);
}
