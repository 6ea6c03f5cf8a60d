//! Vertical federated ridge regression. A holds features, B holds features
//! and labels, C holds the Paillier keypair and only ever sees masked
//! gradients.
//!
//! Objective: `||X_A θ_A + X_B θ_B - y||² + (λ/2) ||θ||²`, so each party's
//! gradient is `2 X^T d + λ θ` with the shared residual `d`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_aligned, FeatureTable};
use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, FixedPoint, Keypair, PublicKey, DEFAULT_FRAC_BITS};
use crate::seed;
use crate::transport::{Bus, Envelope, LeakProbe, MessageKind, Participant, Payload, Protocol, Secrets};

pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Masks are drawn from `[-M, M]` with `M = MASK_FACTOR * grad_bound`.
pub const MASK_FACTOR: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VflrConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Both parties stop once their own `||Δθ||∞` falls below this.
    pub tol: f64,
    #[serde(default = "default_key_bits")]
    pub key_bits: u32,
    #[serde(default = "default_frac_bits")]
    pub frac_bits: u32,
    /// Public bound on gradient magnitude; defaults to `16 * n_samples`.
    #[serde(default)]
    pub grad_bound: Option<f64>,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_key_bits() -> u32 {
    1024
}

fn default_frac_bits() -> u32 {
    DEFAULT_FRAC_BITS
}

fn yes() -> bool {
    true
}

impl Default for VflrConfig {
    fn default() -> Self {
        VflrConfig {
            lambda: 0.1,
            learning_rate: 1e-3,
            max_epochs: 500,
            tol: 1e-6,
            key_bits: default_key_bits(),
            frac_bits: default_frac_bits(),
            grad_bound: None,
            standardize: true,
            seed: 0,
        }
    }
}

impl VflrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if let Some(b) = self.grad_bound {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::Config("grad_bound must be positive".into()));
            }
        }
        if self.frac_bits == 0 || self.frac_bits > 64 {
            return Err(Error::Config("frac_bits must lie in 1..=64".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MaskState {
    epoch: usize,
    values: Vec<FixedPoint>,
}

/// A feature holder. B additionally carries labels and the bias column.
#[derive(Clone, Debug)]
pub struct VflrParty {
    pub who: Participant,
    /// Row-major design block as used in training (standardized, and with a
    /// trailing constant column on B).
    pub x: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    labels: Option<Vec<f64>>,
    pk: PublicKey,
    mask: Option<MaskState>,
    mask_bound: f64,
}

pub type VflrPartyA = VflrParty;
pub type VflrPartyB = VflrParty;

impl VflrParty {
    pub fn n_features(&self) -> usize {
        self.theta.len()
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    /// Half-width of this party's mask distribution.
    pub fn mask_bound(&self) -> f64 {
        self.mask_bound
    }

    fn partial(&self) -> Vec<f64> {
        self.x
            .iter()
            .map(|row| row.iter().zip(&self.theta).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub struct ThirdPartyC {
    keys: Keypair,
}

impl ThirdPartyC {
    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VflrEpoch {
    pub epoch: usize,
    pub delta_theta_a: f64,
    pub delta_theta_b: f64,
    /// Observer-side training MSE after the update (not part of the protocol).
    pub train_mse: f64,
    /// Parameters at the start of the epoch.
    pub theta_a: Vec<f64>,
    pub theta_b: Vec<f64>,
    /// Gradients as recovered by each party after unmasking.
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

pub struct VflrOutcome {
    pub theta_a: Vec<f64>,
    pub theta_b: Vec<f64>,
    pub history: Vec<VflrEpoch>,
    pub converged: bool,
    pub secrets: Secrets,
}

pub fn vflr_bus() -> Bus {
    Bus::new(Protocol::Vflr, &[Participant::A, Participant::B, Participant::C])
}

fn received_key(bus: &mut Bus, at: Participant) -> Result<PublicKey> {
    match bus.recv(at, MessageKind::PublicKey)?.payload {
        Payload::PublicKey { n, g } => PublicKey::from_parts(n, g),
        _ => Err(Error::PayloadSchema(MessageKind::PublicKey)),
    }
}

fn expect_cts(env: Envelope) -> Result<Vec<Ciphertext>> {
    match env.payload {
        Payload::Ciphertexts(c) => Ok(c),
        _ => Err(Error::PayloadSchema(env.kind)),
    }
}

/// C generates the keypair and sends the public key to both holders. Feature
/// blocks are standardized locally and B gets a constant bias column.
pub fn vflr_init(
    table_a: &FeatureTable,
    table_b: &FeatureTable,
    cfg: &VflrConfig,
    bus: &mut Bus,
) -> Result<(VflrPartyA, VflrPartyB, ThirdPartyC)> {
    cfg.validate()?;
    check_aligned(table_a, table_b)?;
    let labels = table_b
        .labels
        .clone()
        .ok_or(Error::Alignment("party B holds no labels"))?;
    if table_a.n_rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let prep = |t: &FeatureTable| {
        let mut t = t.clone();
        if cfg.standardize {
            t.standardize();
        }
        t.rows
    };
    let x_a = prep(table_a);
    let mut x_b = prep(table_b);
    x_b.iter_mut().for_each(|r| r.push(1.0));

    bus.set_epoch(0);
    let c = ThirdPartyC {
        keys: Keypair::generate(cfg.key_bits, &mut seed::rng(cfg.seed, &[seed::tags::KEYGEN]))?,
    };
    for to in [Participant::A, Participant::B] {
        bus.send(Envelope::new(
            Participant::C,
            to,
            MessageKind::PublicKey,
            Payload::public_key(&c.keys.public),
        ))?;
    }
    let mask_bound =
        MASK_FACTOR * cfg.grad_bound.unwrap_or(16.0 * table_a.n_rows() as f64);
    let a = VflrParty {
        who: Participant::A,
        theta: vec![0.0; table_a.n_cols()],
        x: x_a,
        labels: None,
        pk: received_key(bus, Participant::A)?,
        mask: None,
        mask_bound,
    };
    let b = VflrParty {
        who: Participant::B,
        theta: vec![0.0; table_b.n_cols() + 1],
        x: x_b,
        labels: Some(labels),
        pk: received_key(bus, Participant::B)?,
        mask: None,
        mask_bound,
    };
    Ok((a, b, c))
}

fn encrypt_vec<R: Rng + ?Sized>(
    pk: &PublicKey,
    v: &[f64],
    frac_bits: u32,
    rng: &mut R,
) -> Result<Vec<Ciphertext>> {
    v.iter().map(|&x| pk.encrypt_real(x, frac_bits, rng)).collect()
}

/// `[[X_A θ_A]]`, one ciphertext per sample.
pub fn vflr_partial_a(a: &VflrParty, cfg: &VflrConfig, epoch: usize) -> Result<Vec<Ciphertext>> {
    let mut rng = seed::rng(cfg.seed, &[seed::tags::ENCRYPT, 1, epoch as u64]);
    encrypt_vec(&a.pk, &a.partial(), cfg.frac_bits, &mut rng)
}

/// `[[d]] = [[X_A θ_A]] ⊕ [[X_B θ_B - y]]`.
pub fn vflr_residual(
    b: &VflrParty,
    partial_a: &[Ciphertext],
    cfg: &VflrConfig,
    epoch: usize,
) -> Result<Vec<Ciphertext>> {
    let y = b.labels.as_ref().ok_or(Error::Alignment("party B holds no labels"))?;
    if partial_a.len() != y.len() {
        return Err(Error::Alignment("partial prediction count differs from label count"));
    }
    let own: Vec<f64> = b.partial().iter().zip(y).map(|(p, t)| p - t).collect();
    let mut rng = seed::rng(cfg.seed, &[seed::tags::ENCRYPT, 2, epoch as u64]);
    let enc = encrypt_vec(&b.pk, &own, cfg.frac_bits, &mut rng)?;
    partial_a
        .iter()
        .zip(&enc)
        .map(|(u, v)| b.pk.add(u, v))
        .collect()
}

fn party_tag(who: Participant) -> u64 {
    match who {
        Participant::A => 1,
        Participant::B => 2,
        _ => 0,
    }
}

/// `2 [[d]] X + λ [[θ]] + [[R]]`, with a fresh mask drawn and retained for
/// this epoch.
pub fn vflr_masked_grad(
    party: &mut VflrParty,
    d: &[Ciphertext],
    cfg: &VflrConfig,
    epoch: usize,
) -> Result<Vec<Ciphertext>> {
    if d.len() != party.x.len() {
        return Err(Error::Alignment("residual count differs from sample count"));
    }
    let pk = &party.pk;
    let f = cfg.frac_bits;
    let tag = party_tag(party.who);
    let mut enc_rng = seed::rng(cfg.seed, &[seed::tags::ENCRYPT, 2 + tag, epoch as u64]);
    let mut mask_rng = seed::rng(cfg.seed, &[seed::tags::MASK, tag, epoch as u64]);
    let m = party.mask_bound;

    let mut out = Vec::with_capacity(party.theta.len());
    let mut mask = Vec::with_capacity(party.theta.len());
    for j in 0..party.theta.len() {
        let mut acc = pk.zero(2);
        for (di, row) in d.iter().zip(&party.x) {
            let term = pk.scalar_mul(di, 2.0 * row[j], f)?;
            acc = pk.add(&acc, &term)?;
        }
        let theta = pk.encrypt_real(party.theta[j], f, &mut enc_rng)?;
        acc = pk.add(&acc, &pk.scalar_mul(&theta, cfg.lambda, f)?)?;
        let r = pk.encode_at(mask_rng.random_range(-m..=m), f, 2)?;
        acc = pk.add(&acc, &pk.encrypt(&r, &mut enc_rng)?)?;
        out.push(acc);
        mask.push(r);
    }
    party.mask = Some(MaskState { epoch, values: mask });
    Ok(out)
}

/// C's side: exact fixed-point decryption of masked gradients.
pub fn vflr_c_decrypt(c: &ThirdPartyC, masked: &[Ciphertext]) -> Result<Vec<FixedPoint>> {
    masked.iter().map(|ct| c.keys.decrypt(ct)).collect()
}

/// Removes the retained mask and takes one gradient step. Returns the
/// recovered gradient and `||Δθ||∞`.
pub fn vflr_unmask_update(
    party: &mut VflrParty,
    masked: &[FixedPoint],
    epoch: usize,
    cfg: &VflrConfig,
) -> Result<(Vec<f64>, f64)> {
    let state = party.mask.take().ok_or(Error::MaskEpoch { expected: epoch, got: 0 })?;
    if state.epoch != epoch {
        let got = state.epoch;
        party.mask = Some(state);
        return Err(Error::MaskEpoch { expected: epoch, got });
    }
    if masked.len() != party.theta.len() {
        return Err(Error::Shape {
            what: "masked gradient",
            expected: party.theta.len(),
            got: masked.len(),
        });
    }
    let mut grad = Vec::with_capacity(masked.len());
    for (mv, r) in masked.iter().zip(&state.values) {
        let g = party.pk.sub_plain(mv, r)?;
        grad.push(party.pk.decode(&g, cfg.frac_bits));
    }
    let mut delta = 0.0f64;
    for (t, g) in party.theta.iter_mut().zip(&grad) {
        let step = cfg.learning_rate * g;
        *t -= step;
        delta = delta.max(step.abs());
    }
    Ok((grad, delta))
}

/// Observer-side training MSE on the pooled design; not a protocol step.
pub fn vflr_train_mse(a: &VflrParty, b: &VflrParty) -> f64 {
    let Some(y) = b.labels.as_ref() else {
        return f64::NAN;
    };
    let pa = a.partial();
    let pb = b.partial();
    let n = y.len().max(1) as f64;
    pa.iter()
        .zip(&pb)
        .zip(y)
        .map(|((u, v), t)| (u + v - t) * (u + v - t))
        .sum::<f64>()
        / n
}

fn masked_plain(env: Envelope) -> Result<Vec<FixedPoint>> {
    match env.payload {
        Payload::Masked(v) => Ok(v),
        _ => Err(Error::PayloadSchema(MessageKind::MaskedPlain)),
    }
}

fn flag(env: Envelope) -> Result<bool> {
    match env.payload {
        Payload::Flag(v) => Ok(v),
        _ => Err(Error::PayloadSchema(MessageKind::ConvergenceFlag)),
    }
}

pub fn vflr_train(
    a: &mut VflrParty,
    b: &mut VflrParty,
    c: &ThirdPartyC,
    cfg: &VflrConfig,
    bus: &mut Bus,
    leak: LeakProbe,
) -> Result<VflrOutcome> {
    use Participant::{A, B, C};
    cfg.validate()?;
    let mut secrets = Secrets::new().with_decoder(c.keys.public.clone(), cfg.frac_bits);
    secrets.add("A features", a.x.iter().flatten().copied().collect());
    secrets.add("B features", b.x.iter().flatten().copied().collect());
    secrets.add("B labels", b.labels.clone().unwrap_or_default());

    let mut history = Vec::new();
    let mut converged = false;
    for epoch in 1..=cfg.max_epochs {
        bus.set_epoch(epoch);
        let theta_a = a.theta.clone();
        let theta_b = b.theta.clone();

        if leak.fires(epoch) {
            bus.send(Envelope::new(A, B, MessageKind::EncPartial, Payload::PlainVector(a.theta.clone())))?;
            bus.drain(B, MessageKind::EncPartial);
        }
        bus.send(Envelope::new(
            A,
            B,
            MessageKind::EncPartial,
            Payload::Ciphertexts(vflr_partial_a(a, cfg, epoch)?),
        ))?;
        let partial = expect_cts(bus.recv(B, MessageKind::EncPartial)?)?;
        let d = vflr_residual(b, &partial, cfg, epoch)?;
        bus.send(Envelope::new(B, A, MessageKind::EncResidual, Payload::Ciphertexts(d.clone())))?;
        let d_at_a = expect_cts(bus.recv(A, MessageKind::EncResidual)?)?;

        let ga = vflr_masked_grad(a, &d_at_a, cfg, epoch)?;
        bus.send(Envelope::new(A, C, MessageKind::MaskedGrad, Payload::Ciphertexts(ga)))?;
        let gb = vflr_masked_grad(b, &d, cfg, epoch)?;
        bus.send(Envelope::new(B, C, MessageKind::MaskedGrad, Payload::Ciphertexts(gb)))?;

        for env in bus.drain(C, MessageKind::MaskedGrad) {
            let from = env.from;
            let plain = vflr_c_decrypt(c, &expect_cts(env)?)?;
            bus.send(Envelope::new(C, from, MessageKind::MaskedPlain, Payload::Masked(plain)))?;
        }
        let (grad_a, delta_a) =
            vflr_unmask_update(a, &masked_plain(bus.recv(A, MessageKind::MaskedPlain)?)?, epoch, cfg)?;
        let (grad_b, delta_b) =
            vflr_unmask_update(b, &masked_plain(bus.recv(B, MessageKind::MaskedPlain)?)?, epoch, cfg)?;

        for (label, v) in [
            ("A parameters", &theta_a),
            ("B parameters", &theta_b),
            ("A gradient", &grad_a),
            ("B gradient", &grad_b),
        ] {
            if v.iter().any(|x| *x != 0.0) {
                secrets.add(format!("{label} epoch {epoch}"), v.clone());
            }
        }

        let peak = a
            .theta
            .iter()
            .chain(&b.theta)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if !peak.is_finite() || peak > DIVERGENCE_GUARD {
            return Err(Error::Diverged(peak));
        }

        let done_a = delta_a < cfg.tol;
        let done_b = delta_b < cfg.tol;
        bus.send(Envelope::new(A, B, MessageKind::ConvergenceFlag, Payload::Flag(done_a)))?;
        bus.send(Envelope::new(B, A, MessageKind::ConvergenceFlag, Payload::Flag(done_b)))?;
        let b_sees = flag(bus.recv(B, MessageKind::ConvergenceFlag)?)?;
        let a_sees = flag(bus.recv(A, MessageKind::ConvergenceFlag)?)?;

        history.push(VflrEpoch {
            epoch,
            delta_theta_a: delta_a,
            delta_theta_b: delta_b,
            train_mse: vflr_train_mse(a, b),
            theta_a,
            theta_b,
            grad_a,
            grad_b,
        });
        if done_a && a_sees && done_b && b_sees {
            converged = true;
            break;
        }
    }
    Ok(VflrOutcome {
        theta_a: a.theta.clone(),
        theta_b: b.theta.clone(),
        history,
        converged,
        secrets,
    })
}
