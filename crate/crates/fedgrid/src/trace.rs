//! JSON-lines trace export and offline whitelist/schema audit.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fedgrid_core::transport::{
    AuditTrace, Delivery, MessageKind, Participant, Payload, Protocol, Whitelist,
};

use crate::error::{AppError, Result};
use crate::io::write_text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub seq: u64,
    pub epoch: usize,
    pub from: Participant,
    pub to: Participant,
    pub kind: MessageKind,
    pub status: Delivery,
    /// Bytes of the JSON-encoded payload.
    pub size: usize,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
}

pub fn trace_lines(trace: &AuditTrace, full: bool) -> Vec<TraceLine> {
    trace
        .entries()
        .iter()
        .map(|e| {
            let body = serde_json::to_vec(&e.envelope.payload).expect("payload serializes");
            TraceLine {
                seq: e.seq,
                epoch: e.epoch,
                from: e.envelope.from,
                to: e.envelope.to,
                kind: e.envelope.kind,
                status: e.status,
                size: body.len(),
                sha256: hex::encode(Sha256::digest(&body)),
                payload: full.then(|| e.envelope.payload.clone()),
            }
        })
        .collect()
}

pub fn render_trace(trace: &AuditTrace, full: bool) -> String {
    let mut out = String::new();
    for line in trace_lines(trace, full) {
        let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("trace line serializes"));
    }
    out
}

pub fn write_trace(path: &Path, trace: &AuditTrace, full: bool) -> Result<()> {
    write_text(path, &render_trace(trace, full))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceLine>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| AppError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OfflineFinding {
    pub seq: u64,
    pub from: Participant,
    pub to: Participant,
    pub kind: MessageKind,
    pub reason: String,
}

/// Checks an exported trace against the protocol whitelist. Payload schemas
/// are checked only when the trace carries full payloads.
pub fn audit_lines(lines: &[TraceLine], protocol: Protocol) -> Vec<OfflineFinding> {
    let wl = Whitelist::for_protocol(protocol);
    let mut out = Vec::new();
    for l in lines {
        let mut flag = |reason: &str| {
            out.push(OfflineFinding {
                seq: l.seq,
                from: l.from,
                to: l.to,
                kind: l.kind,
                reason: reason.into(),
            })
        };
        if !wl.allows(l.from, l.to, l.kind) {
            flag("kind not whitelisted for this sender and receiver");
        }
        if let Some(p) = &l.payload {
            if !l.kind.accepts(p) {
                flag("payload does not match the kind's schema");
            }
        }
    }
    out
}
