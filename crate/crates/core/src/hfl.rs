//! Horizontal federated training: parties hold disjoint samples of one
//! feature space, and a server averages their encrypted parameters each epoch.
//!
//! Party 0 generates the keypair and hands the private key to the other
//! parties out of band; the server only ever receives the public key.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{train_epoch, Dataset, Learner, ModelParams, TrainConfig};
use crate::paillier::{Ciphertext, Keypair, PublicKey, DEFAULT_FRAC_BITS};
use crate::seed;
use crate::transport::{
    Bus, Envelope, FailurePolicy, LeakProbe, MessageKind, Participant, Payload, Protocol, Secrets,
};

/// Parameter magnitude beyond which a run is declared divergent.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HflConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_key_bits")]
    pub key_bits: u32,
    #[serde(default = "default_frac_bits")]
    pub frac_bits: u32,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Per-party, per-epoch probability that an upload misses the round.
    #[serde(default)]
    pub drop_prob: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Weight party updates by sample count instead of a plain mean.
    #[serde(default)]
    pub weighted: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_key_bits() -> u32 {
    1024
}

fn default_frac_bits() -> u32 {
    DEFAULT_FRAC_BITS
}

fn default_init_scale() -> f64 {
    0.1
}

fn default_tol() -> f64 {
    1e-3
}

fn default_patience() -> usize {
    3
}

impl Default for HflConfig {
    fn default() -> Self {
        HflConfig {
            train: TrainConfig::default(),
            key_bits: default_key_bits(),
            frac_bits: default_frac_bits(),
            init_scale: default_init_scale(),
            drop_prob: 0.0,
            tol: default_tol(),
            patience: default_patience(),
            weighted: false,
            seed: 0,
        }
    }
}

impl HflConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!(
                "drop_prob must lie in [0, 1), got {}",
                self.drop_prob
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config("init_scale must be a finite non-negative number".into()));
        }
        if self.frac_bits == 0 || self.frac_bits > 64 {
            return Err(Error::Config("frac_bits must lie in 1..=64".into()));
        }
        Ok(())
    }
}

pub struct HflParty {
    pub id: u32,
    pub dataset: Dataset,
    /// Local parameters after the most recent local step.
    pub params: ModelParams,
    /// Latest broadcast from the server.
    pub global: Vec<Ciphertext>,
    keys: Keypair,
}

impl HflParty {
    pub fn participant(&self) -> Participant {
        Participant::Party(self.id)
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    /// Decrypts the latest broadcast.
    pub fn decrypt_global(&self, frac_bits: u32) -> Result<ModelParams> {
        let values = self.keys.decrypt_vec(&self.global, frac_bits)?;
        ModelParams::new(self.params.layout.clone(), values)
    }
}

/// The aggregator. Holds no private key.
pub struct AggServer {
    key: PublicKey,
    frac_bits: u32,
    /// Sample counts, known only when weighted averaging is enabled.
    sizes: Option<Vec<usize>>,
    current: Vec<Ciphertext>,
    received: Vec<(u32, Vec<Ciphertext>)>,
    losses: Vec<(u32, f64)>,
}

impl AggServer {
    pub fn public_key(&self) -> &PublicKey {
        &self.key
    }

    pub fn current(&self) -> &[Ciphertext] {
        &self.current
    }

    pub fn received(&self) -> &[(u32, Vec<Ciphertext>)] {
        &self.received
    }

    pub fn losses(&self) -> &[(u32, f64)] {
        &self.losses
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub epoch: usize,
    /// Loss of each party at the incoming parameters; `None` when its upload
    /// was lost.
    pub party_losses: Vec<Option<f64>>,
    /// Mean over received losses; `None` when nothing arrived.
    pub avg_loss: Option<f64>,
    pub arrivals: Vec<u32>,
}

pub struct HflOutcome {
    pub params: ModelParams,
    pub reports: Vec<RoundReport>,
    /// Decrypted global parameters after each epoch.
    pub history: Vec<ModelParams>,
    pub converged: bool,
    /// Plaintext values that must never cross the wire.
    pub secrets: Secrets,
}

/// A bus for `parties` parties plus the server, with upload dropout taken
/// from the config.
pub fn hfl_bus(parties: usize, cfg: &HflConfig) -> Result<Bus> {
    let mut members: Vec<Participant> = (0..parties as u32).map(Participant::Party).collect();
    members.push(Participant::Server);
    Bus::new(Protocol::Hfl, &members).with_failures(FailurePolicy::hfl_uploads(
        cfg.drop_prob,
        seed::derive(cfg.seed, &[seed::tags::DROPOUT]),
    ))
}

fn check_shapes(datasets: &[Dataset]) -> Result<()> {
    let first = datasets
        .iter()
        .find_map(|d| d.inputs.first().zip(d.labels.first()))
        .ok_or(Error::EmptyBatch)?;
    let (in_len, out_len) = (first.0.len(), first.1.len());
    for d in datasets {
        if d.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if d.labels.len() != d.inputs.len() {
            return Err(Error::Shape {
                what: "labels per party",
                expected: d.inputs.len(),
                got: d.labels.len(),
            });
        }
        for (x, y) in d.inputs.iter().zip(&d.labels) {
            if x.len() != in_len {
                return Err(Error::Shape {
                    what: "input width across parties",
                    expected: in_len,
                    got: x.len(),
                });
            }
            if y.len() != out_len {
                return Err(Error::Shape {
                    what: "label width across parties",
                    expected: out_len,
                    got: y.len(),
                });
            }
        }
    }
    Ok(())
}

fn ciphertexts(env: Envelope) -> Option<Vec<Ciphertext>> {
    match env.payload {
        Payload::Ciphertexts(c) => Some(c),
        _ => None,
    }
}

/// Key generation, initial parameters, and the setup broadcast (epoch 0).
pub fn hfl_init<L: Learner + ?Sized>(
    learner: &L,
    datasets: Vec<Dataset>,
    cfg: &HflConfig,
    bus: &mut Bus,
) -> Result<(Vec<HflParty>, AggServer)> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("at least one party is required".into()));
    }
    check_shapes(&datasets)?;
    bus.set_epoch(0);

    let keys = Keypair::generate(cfg.key_bits, &mut seed::rng(cfg.seed, &[seed::tags::KEYGEN]))?;
    let layout = learner.layout();
    let omega0 = layout.init_uniform(cfg.init_scale, cfg.seed);
    let first = Participant::Party(0);
    let mut rng = seed::rng(cfg.seed, &[seed::tags::ENCRYPT, 0, 0]);
    let enc0 = omega0
        .values
        .iter()
        .map(|&v| keys.public.encrypt_real(v, cfg.frac_bits, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    bus.send(Envelope::new(
        first,
        Participant::Server,
        MessageKind::PublicKey,
        Payload::public_key(&keys.public),
    ))?;
    bus.send(Envelope::new(
        first,
        Participant::Server,
        MessageKind::EncParams,
        Payload::Ciphertexts(enc0),
    ))?;

    let key = match bus.recv(Participant::Server, MessageKind::PublicKey)?.payload {
        Payload::PublicKey { n, g } => PublicKey::from_parts(n, g)?,
        _ => return Err(Error::PayloadSchema(MessageKind::PublicKey)),
    };
    let current = ciphertexts(bus.recv(Participant::Server, MessageKind::EncParams)?)
        .ok_or(Error::PayloadSchema(MessageKind::EncParams))?;
    let server = AggServer {
        key,
        frac_bits: cfg.frac_bits,
        sizes: cfg.weighted.then(|| datasets.iter().map(Dataset::len).collect()),
        current,
        received: Vec::new(),
        losses: Vec::new(),
    };

    let mut parties = Vec::with_capacity(datasets.len());
    for (id, dataset) in datasets.into_iter().enumerate() {
        let id = id as u32;
        bus.send(Envelope::new(
            Participant::Server,
            Participant::Party(id),
            MessageKind::EncParams,
            Payload::Ciphertexts(server.current.clone()),
        ))?;
        let global = ciphertexts(bus.recv(Participant::Party(id), MessageKind::EncParams)?)
            .ok_or(Error::PayloadSchema(MessageKind::EncParams))?;
        let values = keys.decrypt_vec(&global, cfg.frac_bits)?;
        parties.push(HflParty {
            id,
            dataset,
            params: ModelParams::new(layout.clone(), values)?,
            global,
            keys: keys.clone(),
        });
    }
    Ok((parties, server))
}

/// Decrypts the broadcast, takes one local epoch, and re-encrypts.
/// Returns the encrypted update and the loss at the incoming parameters.
pub fn hfl_local_epoch<L: Learner + ?Sized>(
    party: &mut HflParty,
    learner: &L,
    global: &[Ciphertext],
    cfg: &HflConfig,
    epoch: usize,
) -> Result<(Vec<Ciphertext>, f64)> {
    let layout = party.params.layout.clone();
    if global.len() != layout.len() {
        return Err(Error::Shape {
            what: "encrypted parameter vector",
            expected: layout.len(),
            got: global.len(),
        });
    }
    let values = party.keys.decrypt_vec(global, cfg.frac_bits)?;
    let incoming = ModelParams::new(layout, values)?;
    let (loss, next) = train_epoch(
        learner,
        &incoming,
        &party.dataset,
        &cfg.train,
        epoch,
        u64::from(party.id),
    )?;
    let mut rng = seed::rng(
        cfg.seed,
        &[seed::tags::ENCRYPT, u64::from(party.id) + 1, epoch as u64],
    );
    let enc = next
        .values
        .iter()
        .map(|&v| party.keys.public.encrypt_real(v, cfg.frac_bits, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    party.params = next;
    Ok((enc, loss))
}

/// Coordinate-wise ciphertext average over the updates that arrived. With no
/// arrivals the previous global parameters are returned unchanged.
pub fn hfl_aggregate(
    server: &mut AggServer,
    received: &[(u32, Vec<Ciphertext>)],
) -> Result<Vec<Ciphertext>> {
    if received.is_empty() {
        return Ok(server.current.clone());
    }
    let width = server.current.len();
    for (_, v) in received {
        if v.len() != width {
            return Err(Error::Shape {
                what: "received parameter vector",
                expected: width,
                got: v.len(),
            });
        }
    }
    let weights: Option<Vec<f64>> = match &server.sizes {
        Some(sizes) => {
            let counts: Vec<f64> = received
                .iter()
                .map(|(id, _)| {
                    sizes
                        .get(*id as usize)
                        .map(|&s| s as f64)
                        .ok_or(Error::UnknownParticipant(Participant::Party(*id)))
                })
                .collect::<Result<_>>()?;
            let total: f64 = counts.iter().sum();
            Some(counts.iter().map(|c| c / total).collect())
        }
        None => None,
    };
    let mut out = Vec::with_capacity(width);
    let mut column = Vec::with_capacity(received.len());
    for j in 0..width {
        column.clear();
        column.extend(received.iter().map(|(_, v)| v[j].clone()));
        out.push(server.key.average(&column, weights.as_deref(), server.frac_bits)?);
    }
    server.current = out.clone();
    Ok(out)
}

/// True once the last `patience` relative improvements of the loss history
/// are all below `tol`. Needs `patience + 1` entries.
pub fn hfl_convergence(history: &[f64], tol: f64, patience: usize) -> bool {
    if patience == 0 || history.len() < patience + 1 {
        return false;
    }
    history[history.len() - patience - 1..].windows(2).all(|w| {
        let (prev, cur) = (w[0], w[1]);
        let rel = if prev.abs() > 0.0 { (prev - cur) / prev.abs() } else { 0.0 };
        rel < tol
    })
}

/// Runs up to `cfg.train.max_epochs` encrypted rounds. Install failure
/// injection on the bus beforehand for the dropout variant.
pub fn hfl_train<L: Learner + ?Sized>(
    learner: &L,
    parties: &mut [HflParty],
    server: &mut AggServer,
    cfg: &HflConfig,
    bus: &mut Bus,
    leak: LeakProbe,
) -> Result<HflOutcome> {
    cfg.validate()?;
    let first = parties
        .first()
        .ok_or_else(|| Error::Config("at least one party is required".into()))?;
    let mut secrets = Secrets::new();
    secrets.add("initial parameters", first.params.values.clone());
    for p in parties.iter() {
        secrets.add(
            format!("{} inputs", p.participant()),
            p.dataset.inputs.iter().flatten().copied().collect(),
        );
        secrets.add(
            format!("{} labels", p.participant()),
            p.dataset.labels.iter().flatten().copied().collect(),
        );
    }

    let mut reports = Vec::new();
    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut converged = false;
    for epoch in 1..=cfg.train.max_epochs {
        bus.set_epoch(epoch);
        for party in parties.iter_mut() {
            let global = core::mem::take(&mut party.global);
            let (enc, loss) = hfl_local_epoch(party, learner, &global, cfg, epoch)?;
            party.global = global;
            secrets.add(
                format!("{} parameters epoch {epoch}", party.participant()),
                party.params.values.clone(),
            );
            let me = party.participant();
            if leak.fires(epoch) && party.id == 0 {
                bus.send(Envelope::new(
                    me,
                    Participant::Server,
                    MessageKind::EncParams,
                    Payload::PlainVector(party.params.values.clone()),
                ))?;
            }
            bus.send(Envelope::new(
                me,
                Participant::Server,
                MessageKind::EncParams,
                Payload::Ciphertexts(enc),
            ))?;
            bus.send(Envelope::new(
                me,
                Participant::Server,
                MessageKind::PlainLoss,
                Payload::Scalar(loss),
            ))?;
        }

        // server barrier
        server.received.clear();
        server.losses.clear();
        for env in bus.drain(Participant::Server, MessageKind::EncParams) {
            if let (Participant::Party(id), Payload::Ciphertexts(c)) = (env.from, env.payload) {
                server.received.push((id, c));
            }
        }
        for env in bus.drain(Participant::Server, MessageKind::PlainLoss) {
            if let (Participant::Party(id), Payload::Scalar(l)) = (env.from, env.payload) {
                server.losses.push((id, l));
            }
        }
        let mut party_losses = alloc::vec![None; parties.len()];
        for &(id, l) in &server.losses {
            if let Some(slot) = party_losses.get_mut(id as usize) {
                *slot = Some(l);
            }
        }
        let avg_loss = (!server.losses.is_empty()).then(|| {
            server.losses.iter().map(|(_, l)| l).sum::<f64>() / server.losses.len() as f64
        });
        let arrivals: Vec<u32> = server.received.iter().map(|(id, _)| *id).collect();
        let received = core::mem::take(&mut server.received);
        let next = hfl_aggregate(server, &received)?;
        server.received = received;

        for party in parties.iter() {
            let to = party.participant();
            bus.send(Envelope::new(
                Participant::Server,
                to,
                MessageKind::EncParams,
                Payload::Ciphertexts(next.clone()),
            ))?;
            if let Some(avg) = avg_loss {
                bus.send(Envelope::new(
                    Participant::Server,
                    to,
                    MessageKind::AvgLoss,
                    Payload::Scalar(avg),
                ))?;
            }
        }
        let mut agreed = Vec::new();
        for party in parties.iter_mut() {
            let me = party.participant();
            party.global = ciphertexts(bus.recv(me, MessageKind::EncParams)?)
                .ok_or(Error::PayloadSchema(MessageKind::EncParams))?;
            for env in bus.drain(me, MessageKind::AvgLoss) {
                if let Payload::Scalar(l) = env.payload {
                    agreed.push(l);
                }
            }
        }

        let decrypted = parties[0].decrypt_global(cfg.frac_bits)?;
        let peak = decrypted.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !peak.is_finite() || peak > DIVERGENCE_GUARD {
            return Err(Error::Diverged(peak));
        }
        if let Some(l) = avg_loss {
            if !l.is_finite() {
                return Err(Error::Diverged(l));
            }
            losses.push(l);
        }
        history.push(decrypted);
        reports.push(RoundReport {
            epoch,
            party_losses,
            avg_loss,
            arrivals,
        });
        if hfl_convergence(&losses, cfg.tol, cfg.patience) {
            converged = true;
            break;
        }
    }

    let params = match history.last() {
        Some(p) => p.clone(),
        None => parties[0].params.clone(),
    };
    Ok(HflOutcome {
        params,
        reports,
        history,
        converged,
        secrets,
    })
}
