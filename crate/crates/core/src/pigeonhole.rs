//! Replica stores, consistent-hash placement, anti-entropy gossip and the
//! stateless courier that relays envelopes to replicas.

use crate::bacap::{verify_record, BoxId, BoxRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Virtual ring points per replica.
pub const DEFAULT_VNODES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "replica-{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PigeonholeError {
    #[error("invalid placement config: {0}")]
    Config(String),
    #[error("all target replicas failed")]
    AllReplicasFailed,
    #[error("write quorum not met: {acks} of {needed} acks")]
    QuorumNotMet { acks: usize, needed: usize },
    #[error("unknown replica {0}")]
    UnknownReplica(ReplicaId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    BadSignature,
    Conflict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutResult {
    Ack,
    Reject(RejectReason),
}

/// Key-value store of verified records indexed by Box-ID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaStore {
    id: ReplicaId,
    records: BTreeMap<BoxId, BoxRecord>,
    peers: Vec<ReplicaId>,
    online: bool,
}

impl ReplicaStore {
    pub fn new(id: ReplicaId, peers: Vec<ReplicaId>) -> Self {
        Self {
            id,
            records: BTreeMap::new(),
            peers,
            online: true,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn peers(&self) -> &[ReplicaId] {
        &self.peers
    }

    pub fn is_online(&self) -> bool {
        self.online
    }

    /// Takes the replica off the network; couriers see it as failing.
    pub fn set_online(&mut self, online: bool) {
        self.online = online;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, box_id: &BoxId) -> bool {
        self.records.contains_key(box_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &BoxRecord> {
        self.records.values()
    }

    /// Stores `record` iff its signature verifies. First verified write for a
    /// Box-ID wins; an identical rewrite is acknowledged.
    pub fn put(&mut self, record: BoxRecord) -> PutResult {
        if !verify_record(&record) {
            return PutResult::Reject(RejectReason::BadSignature);
        }
        match self.records.get(&record.box_id) {
            Some(existing) if *existing == record => PutResult::Ack,
            Some(_) => PutResult::Reject(RejectReason::Conflict),
            None => {
                self.records.insert(record.box_id, record);
                PutResult::Ack
            }
        }
    }

    pub fn get(&self, box_id: &BoxId) -> Option<&BoxRecord> {
        self.records.get(box_id)
    }

    /// One JSON line per record: `{replica_id, box_id_hex, record_hex}`.
    pub fn dump_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.records.values() {
            let line = StoreDumpLine {
                replica_id: self.id.0,
                box_id_hex: hex::encode(rec.box_id),
                record_hex: hex::encode(rec.to_bytes()),
            };
            out.push_str(&serde_json::to_string(&line).expect("dump line serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDumpLine {
    pub replica_id: u32,
    pub box_id_hex: String,
    pub record_hex: String,
}

/// Consistent-hash ring over replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementConfig {
    n: usize,
    k: usize,
    vnodes: usize,
    ring: Vec<(u64, ReplicaId)>,
}

fn ring_point(replica: ReplicaId, vnode: u32) -> u64 {
    let digest = Sha256::new()
        .chain_update(b"funion/ring/v1")
        .chain_update(replica.0.to_be_bytes())
        .chain_update(vnode.to_be_bytes())
        .finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

fn key_point(box_id: &BoxId) -> u64 {
    let digest = Sha256::new()
        .chain_update(b"funion/ring-key/v1")
        .chain_update(box_id)
        .finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

impl PlacementConfig {
    /// Ring over replicas `0..n` with `vnodes` points each.
    pub fn new(n: usize, k: usize, vnodes: usize) -> Result<Self, PigeonholeError> {
        if n == 0 {
            return Err(PigeonholeError::Config("n must be >= 1".into()));
        }
        if k == 0 || k > n {
            return Err(PigeonholeError::Config(format!("k = {k} must be in 1..={n}")));
        }
        if vnodes == 0 {
            return Err(PigeonholeError::Config("vnodes must be >= 1".into()));
        }
        let mut ring: Vec<(u64, ReplicaId)> = (0..n as u32)
            .flat_map(|r| (0..vnodes as u32).map(move |v| (ring_point(ReplicaId(r), v), ReplicaId(r))))
            .collect();
        ring.sort_unstable();
        Ok(Self { n, k, vnodes, ring })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vnodes(&self) -> usize {
        self.vnodes
    }

    pub fn ring(&self) -> &[(u64, ReplicaId)] {
        &self.ring
    }

    pub fn replica_ids(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.n as u32).map(ReplicaId)
    }
}

/// The `k` distinct replicas met walking clockwise from the key's hash.
pub fn select_replicas(box_id: &BoxId, cfg: &PlacementConfig) -> Vec<ReplicaId> {
    select_replicas_k(box_id, cfg, cfg.k).expect("k validated at construction")
}

/// Like [`select_replicas`] but with an explicit `k`.
pub fn select_replicas_k(
    box_id: &BoxId,
    cfg: &PlacementConfig,
    k: usize,
) -> Result<Vec<ReplicaId>, PigeonholeError> {
    if k > cfg.n {
        return Err(PigeonholeError::Config(format!("k = {k} exceeds n = {}", cfg.n)));
    }
    let h = key_point(box_id);
    let start = cfg.ring.partition_point(|(p, _)| *p < h);
    let mut out = Vec::with_capacity(k);
    for i in 0..cfg.ring.len() {
        if out.len() == k {
            break;
        }
        let (_, id) = cfg.ring[(start + i) % cfg.ring.len()];
        if !out.contains(&id) {
            out.push(id);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GossipStats {
    pub to_a: usize,
    pub to_b: usize,
}

/// Anti-entropy between two replicas: each adopts the other's records whose
/// placement set contains it.
pub fn gossip_sync(
    a: &mut ReplicaStore,
    b: &mut ReplicaStore,
    cfg: &PlacementConfig,
) -> GossipStats {
    assert_ne!(a.id, b.id, "gossip requires two distinct replicas");
    fn push(from: &ReplicaStore, to: &mut ReplicaStore, cfg: &PlacementConfig) -> usize {
        let missing: Vec<BoxRecord> = from
            .records
            .values()
            .filter(|r| !to.contains(&r.box_id))
            .filter(|r| select_replicas(&r.box_id, cfg).contains(&to.id))
            .cloned()
            .collect();
        missing
            .into_iter()
            .filter(|r| to.put(r.clone()) == PutResult::Ack)
            .count()
    }
    let to_b = push(a, b, cfg);
    let to_a = push(b, a, cfg);
    GossipStats { to_a, to_b }
}

/// Gossip every pair of replicas once.
pub fn gossip_all(replicas: &mut [ReplicaStore], cfg: &PlacementConfig) -> usize {
    let mut moved = 0;
    for i in 0..replicas.len() {
        for j in (i + 1)..replicas.len() {
            let (left, right) = replicas.split_at_mut(j);
            let s = gossip_sync(&mut left[i], &mut right[0], cfg);
            moved += s.to_a + s.to_b;
        }
    }
    moved
}

/// Replica-addressed operation carried inside an envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvelopeOp {
    Put(BoxRecord),
    Get(BoxId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub target_replicas: Vec<ReplicaId>,
    op: EnvelopeOp,
    pub reply_handle: u64,
}

/// What a courier is allowed to see of an envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CourierView {
    pub target_replicas: Vec<ReplicaId>,
    pub size: usize,
}

impl Envelope {
    pub fn put(record: BoxRecord, cfg: &PlacementConfig, reply_handle: u64) -> Self {
        Self {
            target_replicas: select_replicas(&record.box_id, cfg),
            op: EnvelopeOp::Put(record),
            reply_handle,
        }
    }

    pub fn get(box_id: BoxId, cfg: &PlacementConfig, reply_handle: u64) -> Self {
        Self {
            target_replicas: select_replicas(&box_id, cfg),
            op: EnvelopeOp::Get(box_id),
            reply_handle,
        }
    }

    pub fn with_targets(op: EnvelopeOp, target_replicas: Vec<ReplicaId>, reply_handle: u64) -> Self {
        Self {
            target_replicas,
            op,
            reply_handle,
        }
    }

    /// Sealed to the replicas; only they read it.
    pub(crate) fn op(&self) -> &EnvelopeOp {
        &self.op
    }

    /// Encoded size of the sealed op plus routing header.
    pub fn size(&self) -> usize {
        let header = 4 * self.target_replicas.len() + 8 + 1;
        header
            + match &self.op {
                EnvelopeOp::Put(r) => r.wire_len(),
                EnvelopeOp::Get(_) => 32,
            }
    }

    pub fn courier_view(&self) -> CourierView {
        CourierView {
            target_replicas: self.target_replicas.clone(),
            size: self.size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CourierReply {
    Put { acks: usize, rejects: Vec<(ReplicaId, RejectReason)> },
    Found(BoxRecord),
    NotFound,
}

impl CourierReply {
    pub fn encoded_len(&self) -> usize {
        match self {
            CourierReply::Put { .. } => 8,
            CourierReply::Found(r) => 1 + r.wire_len(),
            CourierReply::NotFound => 1,
        }
    }
}

/// Quorum for a write to `k` replicas.
pub fn write_quorum(k: usize) -> usize {
    k.div_ceil(2)
}

/// Entry in a courier's local log. Only time and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CourierLogEntry {
    pub t: f64,
    pub size: usize,
}

/// Stateless relay between the mixnet and the replicas.
#[derive(Debug, Clone, Default)]
pub struct Courier {
    log: Vec<CourierLogEntry>,
}

impl Courier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log(&self) -> &[CourierLogEntry] {
        &self.log
    }

    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    /// Forwards an envelope. A Put goes to every target and succeeds with a
    /// quorum of Acks; a Get tries targets in order until one has the record.
    /// A Get that reaches at least one live replica without finding the
    /// record answers `NotFound`.
    pub fn forward(
        &mut self,
        now: f64,
        envelope: &Envelope,
        replicas: &mut [ReplicaStore],
    ) -> Result<CourierReply, PigeonholeError> {
        let view = envelope.courier_view();
        self.log.push(CourierLogEntry { t: now, size: view.size });
        let mut live = 0usize;
        match envelope.op() {
            EnvelopeOp::Put(record) => {
                let mut acks = 0;
                let mut rejects = Vec::new();
                for id in &view.target_replicas {
                    let store = replica_mut(replicas, *id)?;
                    if !store.is_online() {
                        continue;
                    }
                    live += 1;
                    match store.put(record.clone()) {
                        PutResult::Ack => acks += 1,
                        PutResult::Reject(why) => rejects.push((*id, why)),
                    }
                }
                let needed = write_quorum(view.target_replicas.len());
                if live == 0 || acks == 0 {
                    return Err(PigeonholeError::AllReplicasFailed);
                }
                if acks < needed {
                    return Err(PigeonholeError::QuorumNotMet { acks, needed });
                }
                Ok(CourierReply::Put { acks, rejects })
            }
            EnvelopeOp::Get(box_id) => {
                for id in &view.target_replicas {
                    let store = replica_mut(replicas, *id)?;
                    if !store.is_online() {
                        continue;
                    }
                    live += 1;
                    if let Some(rec) = store.get(box_id) {
                        return Ok(CourierReply::Found(rec.clone()));
                    }
                }
                if live == 0 {
                    Err(PigeonholeError::AllReplicasFailed)
                } else {
                    Ok(CourierReply::NotFound)
                }
            }
        }
    }
}

fn replica_mut(
    replicas: &mut [ReplicaStore],
    id: ReplicaId,
) -> Result<&mut ReplicaStore, PigeonholeError> {
    replicas
        .iter_mut()
        .find(|r| r.id == id)
        .ok_or(PigeonholeError::UnknownReplica(id))
}

/// `n` replicas with ids `0..n`, each listing the others as peers.
pub fn replica_set(n: usize) -> Vec<ReplicaStore> {
    (0..n as u32)
        .map(|i| {
            let peers = (0..n as u32).filter(|&j| j != i).map(ReplicaId).collect();
            ReplicaStore::new(ReplicaId(i), peers)
        })
        .collect()
}
