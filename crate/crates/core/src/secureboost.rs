//! Vertical gradient-boosted regression trees over histogram bins.
//!
//! B holds the labels and the keypair and drives training. A holds extra
//! features; it receives encrypted gradients, returns encrypted per-bin sums
//! and learns nothing in plaintext. Splits on A's features are stored by B
//! as opaque record ids; only A knows the matching feature and threshold.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{check_aligned, FeatureTable};
use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, Keypair, PublicKey, DEFAULT_FRAC_BITS};
use crate::seed;
use crate::transport::{
    Bus, EncryptedBins, Envelope, LeakProbe, MessageKind, Participant, Payload, Protocol, Secrets,
};

/// Hessian of the squared error for every sample.
pub const HESSIAN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbConfig {
    #[serde(default = "d_trees")]
    pub n_trees: usize,
    #[serde(default = "d_depth")]
    pub max_depth: usize,
    #[serde(default = "d_bins")]
    pub n_bins: usize,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "d_shrinkage")]
    pub shrinkage: f64,
    #[serde(default)]
    pub base_score: f64,
    #[serde(default = "d_min_samples")]
    pub min_samples_leaf: usize,
    #[serde(default = "d_key_bits")]
    pub key_bits: u32,
    #[serde(default = "d_frac_bits")]
    pub frac_bits: u32,
    #[serde(default)]
    pub seed: u64,
}

fn d_trees() -> usize {
    10
}
fn d_depth() -> usize {
    4
}
fn d_bins() -> usize {
    32
}
fn d_lambda() -> f64 {
    1.0
}
fn d_shrinkage() -> f64 {
    1.0
}
fn d_min_samples() -> usize {
    1
}
fn d_key_bits() -> u32 {
    1024
}
fn d_frac_bits() -> u32 {
    DEFAULT_FRAC_BITS
}

impl Default for SbConfig {
    fn default() -> Self {
        SbConfig {
            n_trees: d_trees(),
            max_depth: d_depth(),
            n_bins: d_bins(),
            lambda: d_lambda(),
            gamma: 0.0,
            shrinkage: d_shrinkage(),
            base_score: 0.0,
            min_samples_leaf: d_min_samples(),
            key_bits: d_key_bits(),
            frac_bits: d_frac_bits(),
            seed: 0,
        }
    }
}

impl SbConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1");
        }
        if self.n_bins < 2 {
            return bad("n_bins must be at least 2");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and >= 0");
        }
        if !self.gamma.is_finite() {
            return bad("gamma must be finite");
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return bad("shrinkage must lie in (0, 1]");
        }
        if !self.base_score.is_finite() {
            return bad("base_score must be finite");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1");
        }
        if self.frac_bits == 0 || self.frac_bits > 64 {
            return bad("frac_bits must lie in 1..=64");
        }
        Ok(())
    }

    fn min_child_hess(&self) -> f64 {
        // every sample carries the same hessian, so a hessian sum is a count
        HESSIAN * self.min_samples_leaf as f64 - 1e-9
    }
}

/// `g = 2(ŷ - y)`, `h = 2`.
pub fn sb_grad_hess(pred: &[f64], labels: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.len() != labels.len() {
        return Err(Error::Alignment("prediction count differs from label count"));
    }
    let g = pred.iter().zip(labels).map(|(p, y)| 2.0 * (p - y)).collect();
    Ok((g, vec![HESSIAN; pred.len()]))
}

/// Interior quantile edges: `edge_j = sorted[ceil(j n / B) - 1]` for
/// `j = 1..B`, deduplicated, with edges at the maximum removed.
pub fn sb_build_bins(values: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if n_bins < 2 {
        return Err(Error::Config("n_bins must be at least 2".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let max = sorted[n - 1];
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|j| sorted[(j * n).div_ceil(n_bins) - 1])
        .filter(|&e| e < max)
        .collect();
    edges.dedup();
    Ok(edges)
}

/// Bin of `x`: bin `b` holds `edges[b-1] < x <= edges[b]`.
pub fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| e < x)
}

/// Plaintext per-bin sums for one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub feature: usize,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

/// Sums `g` and `h` of the member rows into bins of one feature.
pub fn sb_aggregate_bins(
    feature: usize,
    bins: &[usize],
    n_bins: usize,
    members: &[usize],
    g: &[f64],
    h: &[f64],
) -> Result<BinStats> {
    if members.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = BinStats {
        feature,
        g: vec![0.0; n_bins],
        h: vec![0.0; n_bins],
    };
    for &i in members {
        let b = bins[i];
        out.g[b] += g[i];
        out.h[b] += h[i];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub feature: usize,
    pub edge: usize,
    pub score: f64,
    pub g_l: f64,
    pub h_l: f64,
    pub g_r: f64,
    pub h_r: f64,
}

/// Prefix scan over every feature's edges. Ties keep the earlier candidate,
/// so the lowest feature and then the lowest edge win. `None` when no
/// candidate beats `gamma`.
pub fn sb_find_split(
    stats: &[BinStats],
    lambda: f64,
    gamma: f64,
    min_child_hess: f64,
) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    for s in stats {
        let g: f64 = s.g.iter().sum();
        let h: f64 = s.h.iter().sum();
        let parent = g * g / (h + lambda);
        let (mut g_l, mut h_l) = (0.0, 0.0);
        for edge in 0..s.g.len().saturating_sub(1) {
            g_l += s.g[edge];
            h_l += s.h[edge];
            let (g_r, h_r) = (g - g_l, h - h_l);
            if h_l < min_child_hess || h_r < min_child_hess {
                continue;
            }
            let score = g_l * g_l / (h_l + lambda) + g_r * g_r / (h_r + lambda) - parent;
            if best.is_none_or(|b| score > b.score) {
                best = Some(SplitCandidate {
                    feature: s.feature,
                    edge,
                    score,
                    g_l,
                    h_l,
                    g_r,
                    h_r,
                });
            }
        }
    }
    best.filter(|b| b.score > gamma)
}

/// `w = -g / (h + λ)`.
pub fn sb_leaf_weight(g: f64, h: f64, lambda: f64) -> Result<f64> {
    let den = h + lambda;
    if !(den > 0.0) {
        return Err(Error::DegenerateLeaf(den));
    }
    Ok(-g / den + 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        weight: f64,
    },
    /// Only the owner can resolve `record` into a feature and threshold.
    Split {
        owner: Participant,
        record: u64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn leaves(&self) -> Vec<f64> {
        match self {
            TreeNode::Leaf { weight } => vec![*weight],
            TreeNode::Split { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    /// Index into the owner's own feature columns.
    pub feature: usize,
    /// Samples with `x <= threshold` go left.
    pub threshold: f64,
}

/// One party's private record id -> rule table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitLookup {
    pub rules: BTreeMap<u64, SplitRule>,
}

impl SplitLookup {
    pub fn get(&self, record: u64) -> Result<SplitRule> {
        self.rules.get(&record).copied().ok_or(Error::UnknownRecord(record))
    }

    /// `true` means left.
    pub fn direction(&self, record: u64, row: &[f64]) -> Result<bool> {
        let rule = self.get(record)?;
        let x = row.get(rule.feature).ok_or(Error::Shape {
            what: "feature row",
            expected: rule.feature + 1,
            got: row.len(),
        })?;
        Ok(*x <= rule.threshold)
    }
}

/// B's half of the model. A's half is its [`SplitLookup`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub trees: Vec<TreeNode>,
    pub base_score: f64,
    pub shrinkage: f64,
    pub lambda: f64,
    pub lookup: SplitLookup,
}

/// Diagnostic record of one node, joining both parties' views. Produced for
/// tests and metrics only; never sent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLog {
    pub tree: usize,
    pub node: u64,
    pub depth: usize,
    pub samples: usize,
    /// `(global feature, edge)`; A's features come first.
    pub split: Option<(usize, usize)>,
    pub score: Option<f64>,
    pub weight: Option<f64>,
}

pub struct SbPartyA {
    table: FeatureTable,
    edges: Vec<Vec<f64>>,
    bins: Vec<Vec<usize>>,
    row_of: BTreeMap<u64, usize>,
    pk: PublicKey,
    enc: Option<(Vec<Ciphertext>, Vec<Ciphertext>)>,
    pub lookup: SplitLookup,
}

pub struct SbPartyB {
    table: FeatureTable,
    labels: Vec<f64>,
    edges: Vec<Vec<f64>>,
    bins: Vec<Vec<usize>>,
    row_of: BTreeMap<u64, usize>,
    keys: Keypair,
    pub lookup: SplitLookup,
    preds: Vec<f64>,
    next_record: u64,
}

impl SbPartyA {
    pub fn edges(&self) -> &[Vec<f64>] {
        &self.edges
    }

    /// Homomorphic per-bin sums over the member rows, for every feature.
    fn encrypted_bin_stats(&self, members: &[usize]) -> Result<Vec<EncryptedBins>> {
        let (eg, eh) = self
            .enc
            .as_ref()
            .ok_or(Error::MissingMessage {
                at: Participant::A,
                expected: MessageKind::EncGradHess,
            })?;
        let mut out = Vec::with_capacity(self.edges.len());
        for (f, edges) in self.edges.iter().enumerate() {
            let mut g = vec![self.pk.zero(1); edges.len() + 1];
            let mut h = g.clone();
            for &i in members {
                let b = self.bins[f][i];
                g[b] = self.pk.add(&g[b], &eg[i])?;
                h[b] = self.pk.add(&h[b], &eh[i])?;
            }
            out.push(EncryptedBins { feature: f, g, h });
        }
        Ok(out)
    }

    fn partition(&self, feature: usize, edge: usize, members: &[usize]) -> (Vec<u64>, Vec<u64>) {
        split_ids(&self.table, &self.bins[feature], edge, members)
    }
}

impl SbPartyB {
    pub fn edges(&self) -> &[Vec<f64>] {
        &self.edges
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn predictions(&self) -> &[f64] {
        &self.preds
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    fn train_mse(&self) -> f64 {
        let n = self.labels.len().max(1) as f64;
        self.preds
            .iter()
            .zip(&self.labels)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / n
    }
}

fn split_ids(table: &FeatureTable, bins: &[usize], edge: usize, members: &[usize]) -> (Vec<u64>, Vec<u64>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &i in members {
        if bins[i] <= edge {
            left.push(table.ids[i]);
        } else {
            right.push(table.ids[i]);
        }
    }
    (left, right)
}

fn rows_of(row_of: &BTreeMap<u64, usize>, ids: &[u64]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| row_of.get(id).copied().ok_or(Error::Alignment("unknown sample id")))
        .collect()
}

fn binned(table: &FeatureTable, n_bins: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    let mut edges = Vec::with_capacity(table.n_cols());
    let mut bins = Vec::with_capacity(table.n_cols());
    for j in 0..table.n_cols() {
        let col = table.column(j);
        let e = sb_build_bins(&col, n_bins)?;
        bins.push(col.iter().map(|&x| bin_of(&e, x)).collect());
        edges.push(e);
    }
    Ok((edges, bins))
}

pub fn sb_bus() -> Bus {
    Bus::new(Protocol::SecureBoost, &[Participant::A, Participant::B])
}

/// B generates the keypair and sends the public key; each side bins its own
/// features locally.
pub fn sb_init(
    table_a: &FeatureTable,
    table_b: &FeatureTable,
    cfg: &SbConfig,
    bus: &mut Bus,
) -> Result<(SbPartyA, SbPartyB)> {
    cfg.validate()?;
    check_aligned(table_a, table_b)?;
    let labels = table_b
        .labels
        .clone()
        .ok_or(Error::Alignment("party B holds no labels"))?;
    if table_b.n_rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    bus.set_epoch(0);
    let keys = Keypair::generate(cfg.key_bits, &mut seed::rng(cfg.seed, &[seed::tags::KEYGEN]))?;
    bus.send(Envelope::new(
        Participant::B,
        Participant::A,
        MessageKind::PublicKey,
        Payload::public_key(&keys.public),
    ))?;
    let pk = match bus.recv(Participant::A, MessageKind::PublicKey)?.payload {
        Payload::PublicKey { n, g } => PublicKey::from_parts(n, g)?,
        _ => return Err(Error::PayloadSchema(MessageKind::PublicKey)),
    };
    let index = |t: &FeatureTable| t.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let (edges_a, bins_a) = binned(table_a, cfg.n_bins)?;
    let (edges_b, bins_b) = binned(table_b, cfg.n_bins)?;
    let a = SbPartyA {
        row_of: index(table_a),
        table: table_a.clone(),
        edges: edges_a,
        bins: bins_a,
        pk,
        enc: None,
        lookup: SplitLookup::default(),
    };
    let b = SbPartyB {
        row_of: index(table_b),
        preds: vec![cfg.base_score; labels.len()],
        table: table_b.clone(),
        labels,
        edges: edges_b,
        bins: bins_b,
        keys,
        lookup: SplitLookup::default(),
        next_record: 1,
    };
    Ok((a, b))
}

pub struct SbOutcome {
    pub model: BoostModel,
    /// Training MSE after each tree.
    pub train_mse: Vec<f64>,
    pub nodes: Vec<NodeLog>,
    pub secrets: Secrets,
}

struct Grower<'a> {
    a: &'a mut SbPartyA,
    b: &'a mut SbPartyB,
    cfg: &'a SbConfig,
    bus: &'a mut Bus,
    g: Vec<f64>,
    h: Vec<f64>,
    tree: usize,
    log: Vec<NodeLog>,
}

impl Grower<'_> {
    fn stats_at(&mut self, members: &[usize]) -> Result<Vec<BinStats>> {
        use Participant::{A, B};
        let enc = self.a.encrypted_bin_stats(members)?;
        self.bus.send(Envelope::new(A, B, MessageKind::EncBinStats, Payload::BinStats(enc)))?;
        let enc = match self.bus.recv(B, MessageKind::EncBinStats)?.payload {
            Payload::BinStats(v) => v,
            _ => return Err(Error::PayloadSchema(MessageKind::EncBinStats)),
        };
        let keys = &self.b.keys;
        let f = self.cfg.frac_bits;
        let n_a = enc.len();
        let mut stats = Vec::with_capacity(n_a + self.b.edges.len());
        for e in &enc {
            stats.push(BinStats {
                feature: e.feature,
                g: keys.decrypt_vec(&e.g, f)?,
                h: keys.decrypt_vec(&e.h, f)?,
            });
        }
        for (j, edges) in self.b.edges.iter().enumerate() {
            stats.push(sb_aggregate_bins(
                n_a + j,
                &self.b.bins[j],
                edges.len() + 1,
                members,
                &self.g,
                &self.h,
            )?);
        }
        Ok(stats)
    }

    fn grow(&mut self, node: u64, members: Vec<usize>, depth: usize) -> Result<TreeNode> {
        use Participant::{A, B};
        let cfg = self.cfg;
        let splittable =
            depth < cfg.max_depth && members.len() >= 2 * cfg.min_samples_leaf;
        let best = if splittable {
            let stats = self.stats_at(&members)?;
            sb_find_split(&stats, cfg.lambda, cfg.gamma, cfg.min_child_hess())
        } else {
            None
        };

        let Some(best) = best else {
            let g: f64 = members.iter().map(|&i| self.g[i]).sum();
            let h: f64 = members.iter().map(|&i| self.h[i]).sum();
            let weight = sb_leaf_weight(g, h, cfg.lambda)?;
            for &i in &members {
                self.b.preds[i] += cfg.shrinkage * weight;
            }
            self.log.push(NodeLog {
                tree: self.tree,
                node,
                depth,
                samples: members.len(),
                split: None,
                score: None,
                weight: Some(weight),
            });
            return Ok(TreeNode::Leaf { weight });
        };

        let record = self.b.next_record;
        self.b.next_record += 1;
        let n_a = self.a.edges.len();
        let (owner, left_ids, right_ids) = if best.feature < n_a {
            self.bus.send(Envelope::new(
                B,
                A,
                MessageKind::SplitDirective,
                Payload::Split {
                    node,
                    feature: best.feature,
                    edge: best.edge,
                    record,
                },
            ))?;
            let Payload::Split { feature, edge, record, .. } =
                self.bus.recv(A, MessageKind::SplitDirective)?.payload
            else {
                return Err(Error::PayloadSchema(MessageKind::SplitDirective));
            };
            let threshold = self.a.edges[feature][edge];
            self.a.lookup.rules.insert(record, SplitRule { feature, threshold });
            let (l, r) = self.a.partition(feature, edge, &members);
            self.bus.send(Envelope::new(
                A,
                B,
                MessageKind::NodePartition,
                Payload::Partition { node, left: l, right: r },
            ))?;
            let Payload::Partition { left, right, .. } =
                self.bus.recv(B, MessageKind::NodePartition)?.payload
            else {
                return Err(Error::PayloadSchema(MessageKind::NodePartition));
            };
            (A, left, right)
        } else {
            let feature = best.feature - n_a;
            let threshold = self.b.edges[feature][best.edge];
            self.b.lookup.rules.insert(record, SplitRule { feature, threshold });
            let (l, r) = split_ids(&self.b.table, &self.b.bins[feature], best.edge, &members);
            self.bus.send(Envelope::new(
                B,
                A,
                MessageKind::NodePartition,
                Payload::Partition { node, left: l.clone(), right: r.clone() },
            ))?;
            // A takes its copy of the membership from the message
            self.bus.recv(A, MessageKind::NodePartition)?;
            (B, l, r)
        };
        self.log.push(NodeLog {
            tree: self.tree,
            node,
            depth,
            samples: members.len(),
            split: Some((best.feature, best.edge)),
            score: Some(best.score),
            weight: None,
        });
        let left_rows = rows_of(&self.b.row_of, &left_ids)?;
        let right_rows = rows_of(&self.b.row_of, &right_ids)?;
        let left = self.grow(2 * node + 1, left_rows, depth + 1)?;
        let right = self.grow(2 * node + 2, right_rows, depth + 1)?;
        Ok(TreeNode::Split {
            owner,
            record,
            left: Box::new(left),
            right: Box::new(right),
        })
    }
}

/// Fits `cfg.n_trees` trees sequentially, one bus epoch per tree.
pub fn sb_train(
    a: &mut SbPartyA,
    b: &mut SbPartyB,
    cfg: &SbConfig,
    bus: &mut Bus,
    leak: LeakProbe,
) -> Result<SbOutcome> {
    use Participant::{A, B};
    cfg.validate()?;
    let mut secrets = Secrets::new();
    secrets.add("A features", a.table.rows.iter().flatten().copied().collect());
    secrets.add("B features", b.table.rows.iter().flatten().copied().collect());
    secrets.add("B labels", b.labels.clone());

    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut train_mse = Vec::with_capacity(cfg.n_trees);
    let mut nodes = Vec::new();
    let f = cfg.frac_bits;
    for t in 0..cfg.n_trees {
        let epoch = t + 1;
        bus.set_epoch(epoch);
        let (g, h) = sb_grad_hess(&b.preds, &b.labels)?;
        // snap to the fixed-point grid so A-side sums decrypt to the exact
        // values B would compute in plaintext
        let pk = b.keys.public.clone();
        let snap = |v: &[f64]| -> Result<Vec<f64>> {
            v.iter().map(|&x| Ok(pk.decode(&pk.encode(x, f)?, f))).collect()
        };
        let g = snap(&g)?;
        let h = snap(&h)?;
        secrets.add(format!("gradients tree {epoch}"), g.clone());

        let mut rng = seed::rng(cfg.seed, &[seed::tags::ENCRYPT, epoch as u64]);
        let enc_g = g
            .iter()
            .map(|&x| pk.encrypt_real(x, f, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_h = h
            .iter()
            .map(|&x| pk.encrypt_real(x, f, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        if leak.fires(epoch) {
            bus.send(Envelope::new(B, A, MessageKind::EncGradHess, Payload::PlainVector(g.clone())))?;
            bus.drain(A, MessageKind::EncGradHess);
        }
        bus.send(Envelope::new(
            B,
            A,
            MessageKind::EncGradHess,
            Payload::GradHess {
                ids: b.table.ids.clone(),
                g: enc_g,
                h: enc_h,
            },
        ))?;
        let Payload::GradHess { ids, g: eg, h: eh } = bus.recv(A, MessageKind::EncGradHess)?.payload
        else {
            return Err(Error::PayloadSchema(MessageKind::EncGradHess));
        };
        // reorder into A's row order
        let rows = rows_of(&a.row_of, &ids)?;
        let mut ag = vec![pk.zero(1); rows.len()];
        let mut ah = ag.clone();
        for ((r, cg), ch) in rows.into_iter().zip(eg).zip(eh) {
            ag[r] = cg;
            ah[r] = ch;
        }
        a.enc = Some((ag, ah));

        let mut grower = Grower {
            a: &mut *a,
            b: &mut *b,
            cfg,
            bus: &mut *bus,
            g,
            h,
            tree: t,
            log: Vec::new(),
        };
        let all: Vec<usize> = (0..grower.b.labels.len()).collect();
        let tree = grower.grow(0, all, 0)?;
        nodes.append(&mut grower.log);
        trees.push(tree);
        train_mse.push(b.train_mse());
        a.enc = None;
    }
    Ok(SbOutcome {
        model: BoostModel {
            trees,
            base_score: cfg.base_score,
            shrinkage: cfg.shrinkage,
            lambda: cfg.lambda,
            lookup: b.lookup.clone(),
        },
        train_mse,
        nodes,
        secrets,
    })
}

/// A's prediction-time service: its lookup table and its half of the rows
/// to be scored.
pub struct SbPredictorA {
    lookup: SplitLookup,
    table: FeatureTable,
    row_of: BTreeMap<u64, usize>,
}

impl SbPredictorA {
    pub fn new(lookup: SplitLookup, table: FeatureTable) -> Self {
        let row_of = table.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        SbPredictorA {
            lookup,
            table,
            row_of,
        }
    }

    /// Answers one pending query with a direction bit.
    pub fn answer(&self, bus: &mut Bus) -> Result<()> {
        let Payload::Query { record, sample } =
            bus.recv(Participant::A, MessageKind::PredictQuery)?.payload
        else {
            return Err(Error::PayloadSchema(MessageKind::PredictQuery));
        };
        let row = self
            .row_of
            .get(&sample)
            .ok_or(Error::Alignment("query for a sample A does not hold"))?;
        let left = self.lookup.direction(record, &self.table.rows[*row])?;
        bus.send(Envelope::new(
            Participant::A,
            Participant::B,
            MessageKind::DirectionBit,
            Payload::Direction(left),
        ))?;
        Ok(())
    }
}

/// B walks every tree for every row of its table, asking A at A-owned
/// splits. Returns `base_score + shrinkage * Σ leaf weights` per row.
pub fn sb_predict(
    model: &BoostModel,
    a: &SbPredictorA,
    rows_b: &FeatureTable,
    bus: &mut Bus,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows_b.n_rows());
    for (row, &id) in rows_b.rows.iter().zip(&rows_b.ids) {
        let mut total = 0.0;
        for tree in &model.trees {
            let mut node = tree;
            loop {
                match node {
                    TreeNode::Leaf { weight } => {
                        total += weight;
                        break;
                    }
                    TreeNode::Split {
                        owner,
                        record,
                        left,
                        right,
                    } => {
                        let go_left = match owner {
                            Participant::B => model.lookup.direction(*record, row)?,
                            _ => {
                                bus.send(Envelope::new(
                                    Participant::B,
                                    Participant::A,
                                    MessageKind::PredictQuery,
                                    Payload::Query {
                                        record: *record,
                                        sample: id,
                                    },
                                ))?;
                                a.answer(bus)?;
                                match bus.recv(Participant::B, MessageKind::DirectionBit)?.payload {
                                    Payload::Direction(d) => d,
                                    _ => return Err(Error::PayloadSchema(MessageKind::DirectionBit)),
                                }
                            }
                        };
                        node = if go_left { left } else { right };
                    }
                }
            }
        }
        out.push(model.base_score + model.shrinkage * total);
    }
    Ok(out)
}
