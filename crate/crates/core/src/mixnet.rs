//! Deterministic discrete-event model of the mixnet transport.
//!
//! Every round-trip echo visits nine delaying nodes: the origin's gateway,
//! three mix layers, the destination service, three mix layers on the
//! reply path and the origin's gateway again. Each adds an independent
//! `Exp(1/mu)` delay, so a round trip is `Erlang(9, 1/mu)`. The observer sees
//! ten link traversals per echo (endpoint to gateway, eight inner links,
//! gateway back to endpoint), each stamped with the constant wire size.
//!
//! Mixes are infinite-server queues with independent delays, so the whole
//! hop schedule of an echo is fixed at launch; the protocol layer only needs
//! the forward-delivery and reply times as events.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use thiserror::Error;

/// Sphinx payload capacity in bytes.
pub const PAYLOAD_CAPACITY: usize = 30_000;
/// Header and routing overhead per packet.
pub const PACKET_OVERHEAD: usize = 1_000;
/// Delaying nodes on one round trip.
pub const HOPS_PER_ECHO: usize = 9;
/// Observable link traversals on one round trip.
pub const LINKS_PER_ECHO: usize = HOPS_PER_ECHO + 1;
pub const MIX_LAYERS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixnetError {
    #[error("topology: {0}")]
    Config(String),
    #[error("payload of {len} bytes exceeds capacity {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("node {0} has no attached gateway")]
    NotAnEndpoint(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Independent RNG streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Delay,
    Route,
    Cover,
    Protocol,
    Workload,
    Trial,
}

impl Stream {
    fn label(self) -> &'static [u8] {
        match self {
            Stream::Delay => b"delay",
            Stream::Route => b"route",
            Stream::Cover => b"cover",
            Stream::Protocol => b"protocol",
            Stream::Workload => b"workload",
            Stream::Trial => b"trial",
        }
    }
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for `(stream, index)`; distinct pairs are independent.
    pub fn rng(&self, stream: Stream, index: u64) -> ChaCha20Rng {
        let digest = Sha256::new()
            .chain_update(b"funion/rng/v1")
            .chain_update(self.seed.to_be_bytes())
            .chain_update(stream.label())
            .chain_update(index.to_be_bytes())
            .finalize();
        ChaCha20Rng::from_seed(digest.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub gateways: Vec<NodeId>,
    pub mix_layers: Vec<Vec<NodeId>>,
    pub storage_couriers: Vec<NodeId>,
    pub compute_couriers: Vec<NodeId>,
    pub clients: Vec<NodeId>,
}

impl Topology {
    /// Sequentially numbered topology: gateways, then mixes layer by layer,
    /// then storage couriers, compute couriers and clients.
    pub fn layered(
        gateways: usize,
        layer_width: usize,
        storage: usize,
        compute: usize,
        clients: usize,
    ) -> Result<Self, MixnetError> {
        let mut next = 0u32;
        let mut take = |n: usize| {
            let ids: Vec<NodeId> = (next..next + n as u32).map(NodeId).collect();
            next += n as u32;
            ids
        };
        let t = Topology {
            gateways: take(gateways),
            mix_layers: (0..MIX_LAYERS).map(|_| take(layer_width)).collect(),
            storage_couriers: take(storage),
            compute_couriers: take(compute),
            clients: take(clients),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), MixnetError> {
        if self.gateways.is_empty() {
            return Err(MixnetError::Config("no gateways".into()));
        }
        if self.mix_layers.len() != MIX_LAYERS {
            return Err(MixnetError::Config(format!(
                "expected {MIX_LAYERS} mix layers, got {}",
                self.mix_layers.len()
            )));
        }
        if let Some(i) = self.mix_layers.iter().position(|l| l.is_empty()) {
            return Err(MixnetError::Config(format!("mix layer {i} is empty")));
        }
        let mut all: Vec<NodeId> = self.all_nodes().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(MixnetError::Config("node ids are not unique".into()));
        }
        Ok(())
    }

    pub fn all_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.gateways
            .iter()
            .chain(self.mix_layers.iter().flatten())
            .chain(&self.storage_couriers)
            .chain(&self.compute_couriers)
            .chain(&self.clients)
            .copied()
    }

    pub fn services(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.storage_couriers.iter().chain(&self.compute_couriers).copied()
    }

    /// Endpoints are clients and compute couriers; both originate echoes
    /// through an attached gateway.
    pub fn is_endpoint(&self, node: NodeId) -> bool {
        self.clients.contains(&node) || self.compute_couriers.contains(&node)
    }

    pub fn gateway_of(&self, endpoint: NodeId) -> Result<NodeId, MixnetError> {
        if !self.is_endpoint(endpoint) {
            return Err(MixnetError::NotAnEndpoint(endpoint));
        }
        Ok(self.gateways[endpoint.0 as usize % self.gateways.len()])
    }
}

/// Uniform pick from a non-empty slice.
pub fn pick_uniform<R: Rng + ?Sized>(rng: &mut R, nodes: &[NodeId]) -> Option<NodeId> {
    if nodes.is_empty() {
        None
    } else {
        Some(nodes[rng.gen_range(0..nodes.len())])
    }
}

/// Forward route `gateway → mix₁ → mix₂ → mix₃ → destination`, one uniform
/// independent pick per layer.
pub fn build_route<R: Rng + ?Sized>(
    topology: &Topology,
    gateway: NodeId,
    destination: NodeId,
    rng: &mut R,
) -> Result<Vec<NodeId>, MixnetError> {
    let mut route = Vec::with_capacity(MIX_LAYERS + 2);
    route.push(gateway);
    for (i, layer) in topology.mix_layers.iter().enumerate() {
        route.push(pick_uniform(rng, layer).ok_or_else(|| MixnetError::Config(format!("mix layer {i} is empty")))?);
    }
    route.push(destination);
    Ok(route)
}

/// Reply route from a service back through the mixes to a gateway.
fn build_reply_route<R: Rng + ?Sized>(
    topology: &Topology,
    gateway: NodeId,
    rng: &mut R,
) -> Result<Vec<NodeId>, MixnetError> {
    let mut route = Vec::with_capacity(MIX_LAYERS + 1);
    for (i, layer) in topology.mix_layers.iter().enumerate() {
        route.push(pick_uniform(rng, layer).ok_or_else(|| MixnetError::Config(format!("mix layer {i} is empty")))?);
    }
    route.push(gateway);
    Ok(route)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    /// Mean per-hop delay in seconds.
    pub mu: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self { mu: 0.20 }
    }
}

impl DelayModel {
    pub fn new(mu: f64) -> Result<Self, MixnetError> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(MixnetError::Config(format!("mu must be >= 0, got {mu}")));
        }
        Ok(Self { mu })
    }

    pub fn lambda(&self) -> f64 {
        1.0 / self.mu
    }

    /// One hop delay. `mu = 0` is the zero-delay limit.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.mu == 0.0 {
            return 0.0;
        }
        Exp::new(self.lambda())
            .expect("rate is positive")
            .sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverSource {
    /// Emissions per second.
    pub lambda_s: f64,
}

impl Default for CoverSource {
    fn default() -> Self {
        Self { lambda_s: 2.5 }
    }
}

impl CoverSource {
    /// Next inter-emission gap; `None` when the rate is zero.
    pub fn next_gap<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        if self.lambda_s <= 0.0 {
            return None;
        }
        Some(Exp::new(self.lambda_s).expect("rate is positive").sample(rng))
    }
}

/// Poisson emission times in `[0, duration)`.
pub fn run_cover_traffic<R: Rng + ?Sized>(
    cover: &CoverSource,
    duration: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = 0.0;
    while let Some(gap) = cover.next_gap(rng) {
        t += gap;
        if t >= duration {
            break;
        }
        out.push(t);
    }
    out
}

/// Observer-hidden packet class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PacketKind {
    Application,
    LoopCover,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub packet_id: u64,
    pub wire_size: usize,
    pub route: Vec<NodeId>,
    pub payload_len: usize,
    pub kind: PacketKind,
    /// Return route token.
    pub surb: Option<Vec<NodeId>>,
}

/// One link traversal with the packet attribution the observer never gets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopEvent {
    pub t: f64,
    pub src: NodeId,
    pub dst: NodeId,
    pub size: usize,
    pub packet_id: u64,
    pub kind: PacketKind,
}

/// What the global passive adversary records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservedEvent {
    pub t: f64,
    pub src: NodeId,
    pub dst: NodeId,
    pub size: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObserverTrace {
    pub events: Vec<ObservedEvent>,
}

impl ObserverTrace {
    /// `{t, src, dst, size}` per line.
    pub fn to_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }

    pub fn links_of(&self, node: NodeId) -> impl Iterator<Item = &ObservedEvent> {
        self.events.iter().filter(move |e| e.src == node || e.dst == node)
    }
}

/// Timing of one echo as scheduled at launch.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoTiming {
    pub packet_id: u64,
    pub launched: f64,
    /// Arrival at the destination service.
    pub delivered: f64,
    /// Arrival of the reply back at the origin endpoint.
    pub returned: f64,
    pub hop_delays: [f64; HOPS_PER_ECHO],
}

impl EchoTiming {
    pub fn round_trip(&self) -> f64 {
        self.returned - self.launched
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceStats {
    pub events: u64,
    pub size_violations: u64,
}

/// Transport state of one simulation run.
#[derive(Debug, Clone)]
pub struct Mixnet {
    topology: Topology,
    delay: DelayModel,
    streams: RngStreams,
    wire_size: usize,
    payload_capacity: usize,
    next_packet: u64,
    record_trace: bool,
    trace: Vec<HopEvent>,
    stats: TraceStats,
}

impl Mixnet {
    pub fn new(
        topology: Topology,
        delay: DelayModel,
        streams: RngStreams,
        payload_capacity: usize,
    ) -> Result<Self, MixnetError> {
        topology.validate()?;
        Ok(Self {
            topology,
            delay,
            streams,
            wire_size: payload_capacity + PACKET_OVERHEAD,
            payload_capacity,
            next_packet: 0,
            record_trace: true,
            trace: Vec::new(),
            stats: TraceStats::default(),
        })
    }

    /// Keep only counters instead of the full hop log.
    pub fn set_record_trace(&mut self, record: bool) {
        self.record_trace = record;
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn delay_model(&self) -> DelayModel {
        self.delay
    }

    pub fn wire_size(&self) -> usize {
        self.wire_size
    }

    pub fn stats(&self) -> TraceStats {
        self.stats
    }

    pub fn packets_sent(&self) -> u64 {
        self.next_packet
    }

    pub fn hop_events(&self) -> &[HopEvent] {
        &self.trace
    }

    /// Creates a packet addressed from `origin` to the service `destination`
    /// with a freshly routed forward path and return token.
    pub fn make_packet(
        &mut self,
        origin: NodeId,
        destination: NodeId,
        kind: PacketKind,
        payload_len: usize,
    ) -> Result<Packet, MixnetError> {
        if payload_len > self.payload_capacity {
            return Err(MixnetError::PayloadTooLarge {
                len: payload_len,
                max: self.payload_capacity,
            });
        }
        let gateway = self.topology.gateway_of(origin)?;
        let packet_id = self.next_packet;
        self.next_packet += 1;
        let mut rng = self.streams.rng(Stream::Route, packet_id);
        let mut route = vec![origin];
        route.extend(build_route(&self.topology, gateway, destination, &mut rng)?);
        let mut surb = build_reply_route(&self.topology, gateway, &mut rng)?;
        surb.push(origin);
        Ok(Packet {
            packet_id,
            wire_size: self.wire_size,
            route,
            payload_len,
            kind,
            surb: Some(surb),
        })
    }

    /// Schedules the full round trip of `packet` launched at `now`.
    pub fn send_echo(&mut self, now: f64, packet: &Packet) -> EchoTiming {
        let mut rng = self.streams.rng(Stream::Delay, packet.packet_id);
        let mut path: Vec<NodeId> = packet.route.clone();
        path.extend(packet.surb.iter().flatten());
        debug_assert_eq!(path.len(), LINKS_PER_ECHO + 1);

        let mut hop_delays = [0.0; HOPS_PER_ECHO];
        let mut t = now;
        let mut delivered = now;
        self.observe(t, path[0], path[1], packet);
        for (i, link) in path[1..].windows(2).enumerate() {
            let d = self.delay.sample(&mut rng);
            hop_delays[i] = d;
            t += d;
            self.observe(t, link[0], link[1], packet);
            if i == MIX_LAYERS + 1 {
                // Delay at the destination service precedes its reply.
                delivered = t - d;
            }
        }
        EchoTiming {
            packet_id: packet.packet_id,
            launched: now,
            delivered,
            returned: t,
            hop_delays,
        }
    }

    /// Convenience: build and send in one go.
    pub fn echo(
        &mut self,
        now: f64,
        origin: NodeId,
        destination: NodeId,
        kind: PacketKind,
        payload_len: usize,
    ) -> Result<EchoTiming, MixnetError> {
        let p = self.make_packet(origin, destination, kind, payload_len)?;
        Ok(self.send_echo(now, &p))
    }

    fn observe(&mut self, t: f64, src: NodeId, dst: NodeId, packet: &Packet) {
        self.stats.events += 1;
        if packet.wire_size != self.wire_size {
            self.stats.size_violations += 1;
        }
        if self.record_trace {
            self.trace.push(HopEvent {
                t,
                src,
                dst,
                size: packet.wire_size,
                packet_id: packet.packet_id,
                kind: packet.kind,
            });
        }
    }

    /// Projection to `(t, link, size)`, time ordered.
    pub fn observer_view(&self) -> ObserverTrace {
        observer_view(&self.trace)
    }
}

/// Projects hop events onto what a global passive observer sees, sorted by
/// time with ties kept in emission order.
pub fn observer_view(events: &[HopEvent]) -> ObserverTrace {
    let mut idx: Vec<usize> = (0..events.len()).collect();
    idx.sort_by(|&a, &b| events[a].t.total_cmp(&events[b].t).then(a.cmp(&b)));
    ObserverTrace {
        events: idx
            .into_iter()
            .map(|i| {
                let e = &events[i];
                ObservedEvent {
                    t: e.t,
                    src: e.src,
                    dst: e.dst,
                    size: e.size,
                }
            })
            .collect(),
    }
}

struct Scheduled<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Priority queue firing events in `(time, insertion sequence)` order.
pub struct EventQueue<E> {
    now: f64,
    seq: u64,
    heap: BinaryHeap<Scheduled<E>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `event` at `time`; times in the past are clamped to now.
    pub fn schedule(&mut self, time: f64, event: E) {
        let time = time.max(self.now);
        self.heap.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let s = self.heap.pop()?;
        self.now = s.time;
        Some((s.time, s.event))
    }
}
