use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{
    bucket::{wait_for_bucket_edge, BucketGrid, BucketStatus},
    chunk_input, frame_output, overflow_marker, parse_output_box, CapabilityRegistry,
    ComputeModel, JobOutcome, JobStatus, LatencyBreakdown, OutputBox, ProtocolError,
};
use crate::bacap::{
    derive_box, generate_capability, open_with_keys, seal_with_keys, BoxId, ReadCapability,
    WriteCapability, CTX_IN, CTX_OUT, MAX_PLAINTEXT,
};
use crate::mixnet::{
    pick_uniform, CoverSource, DelayModel, EchoTiming, EventQueue, Mixnet, NodeId, ObserverTrace,
    PacketKind, RngStreams, Stream, Topology, TraceStats, HOPS_PER_ECHO, PACKET_OVERHEAD,
};
use crate::pigeonhole::{
    gossip_all, replica_set, Courier, CourierReply, Envelope, PigeonholeError, PlacementConfig,
    ReplicaStore, DEFAULT_VNODES,
};

/// Size of the opaque dispatch ticket on the wire.
const TICKET_BYTES: usize = 32 + 32 + 64 + 32 + 8;
const GET_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub gateways: usize,
    pub layer_width: usize,
    pub storage_couriers: usize,
    pub compute_couriers: usize,
    pub clients: usize,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self {
            gateways: 2,
            layer_width: 4,
            storage_couriers: 2,
            compute_couriers: 2,
            clients: 4,
        }
    }
}

impl TopologySpec {
    pub fn build(&self) -> Result<Topology, ProtocolError> {
        Ok(Topology::layered(
            self.gateways,
            self.layer_width,
            self.storage_couriers,
            self.compute_couriers,
            self.clients,
        )?)
    }
}

/// Parameters of one simulated deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub mu: f64,
    pub lambda_s: f64,
    /// Emit Poisson loop cover from every endpoint while jobs are active;
    /// application echoes then take the next cover slot.
    pub cover: bool,
    pub delta: f64,
    pub grid_n: u32,
    pub replicas_n: usize,
    pub replicas_k: usize,
    pub vnodes: usize,
    pub topology: TopologySpec,
    pub payload_size: usize,
    /// Hold results to the bucket edge. Disabling it is an ablation.
    pub bucketing: bool,
    pub record_trace: bool,
    /// Anti-entropy sweep over all replica pairs after the run.
    pub gossip: bool,
    pub offline_replicas: Vec<u32>,
    /// Delay from the dispatch acknowledgement to the first poll. Defaults
    /// to `t_j` plus the two expected echoes the compute side still needs
    /// (fetch and store) with bucketing, one bucket width without.
    pub first_poll_offset: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mu: 0.20,
            lambda_s: 2.5,
            cover: false,
            delta: 0.2,
            grid_n: BucketGrid::default().n,
            replicas_n: 5,
            replicas_k: 3,
            vnodes: DEFAULT_VNODES,
            topology: TopologySpec::default(),
            payload_size: MAX_PLAINTEXT,
            bucketing: true,
            record_trace: true,
            gossip: true,
            offline_replicas: Vec::new(),
            first_poll_offset: None,
        }
    }
}

impl SimConfig {
    pub fn grid(&self) -> Result<BucketGrid, ProtocolError> {
        BucketGrid::new(self.delta, self.grid_n)
    }

    pub fn wire_size(&self) -> usize {
        self.payload_size + PACKET_OVERHEAD
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu: must be >= 0, got {}", self.mu));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_s.is_finite()) {
            return bad(format!("lambda_s: must be >= 0, got {}", self.lambda_s));
        }
        if self.cover && self.lambda_s == 0.0 {
            return bad("lambda_s: cover traffic needs a positive rate".into());
        }
        self.grid()?;
        if self.payload_size <= super::OUTPUT_HEADER_LEN || self.payload_size > MAX_PLAINTEXT {
            return bad(format!(
                "payload_size: must be in {}..={MAX_PLAINTEXT}, got {}",
                super::OUTPUT_HEADER_LEN + 1,
                self.payload_size
            ));
        }
        PlacementConfig::new(self.replicas_n, self.replicas_k, self.vnodes)
            .map_err(|e| ProtocolError::Config(format!("replicas: {e}")))?;
        if let Some(r) = self.offline_replicas.iter().find(|&&r| r as usize >= self.replicas_n) {
            return bad(format!("offline_replicas: {r} is not a replica"));
        }
        let t = &self.topology;
        if t.storage_couriers == 0 || t.compute_couriers == 0 || t.clients == 0 {
            return bad("topology: need at least one storage courier, compute courier and client".into());
        }
        self.topology
            .build()
            .map_err(|e| ProtocolError::Config(format!("topology: {e}")))?;
        Ok(())
    }
}

/// One job as submitted by a client.
#[derive(Debug, Clone)]
pub struct JobSpec {
    /// Index into the topology's client list.
    pub client: usize,
    pub input: Vec<u8>,
    pub bucket_index: u32,
    pub compute: ComputeModel,
    pub start: f64,
    /// Use these instead of fresh capabilities (for misuse tests).
    pub write_in: Option<WriteCapability>,
    pub write_out: Option<WriteCapability>,
}

impl JobSpec {
    pub fn new(client: usize, input: Vec<u8>, bucket_index: u32, compute: ComputeModel) -> Self {
        Self {
            client,
            input,
            bucket_index,
            compute,
            start: 0.0,
            write_in: None,
            write_out: None,
        }
    }

    pub fn starting_at(mut self, t: f64) -> Self {
        self.start = t;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Upload,
    Dispatch,
    ComputeFetch,
    ComputeStore,
    Fetch,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Upload,
        Stage::Dispatch,
        Stage::ComputeFetch,
        Stage::ComputeStore,
        Stage::Fetch,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Labeled record of one application echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoLogEntry {
    pub job_id: u64,
    pub stage: Stage,
    /// Box index within the stage's chain.
    pub index: u64,
    pub packet_id: u64,
    pub origin: NodeId,
    pub destination: NodeId,
    pub launched: f64,
    pub delivered: f64,
    pub returned: f64,
    /// False for a fetch that found nothing yet.
    pub succeeded: bool,
}

#[derive(Debug, Clone)]
struct Ticket {
    job: usize,
    read_in: ReadCapability,
    write_out: WriteCapability,
    bucket_index: u32,
    chunk_count: usize,
    input_courier: NodeId,
}

#[derive(Debug, Clone)]
enum Request {
    Storage(Envelope),
    Dispatch(Box<Ticket>),
    Loop,
}

#[derive(Debug, Clone)]
enum Response {
    Storage(Result<CourierReply, PigeonholeError>),
    DispatchAck,
    Loop,
}

#[derive(Debug, Clone)]
struct Echo {
    job: Option<usize>,
    stage: Option<Stage>,
    index: u64,
    origin: NodeId,
    destination: NodeId,
    payload_len: usize,
    request: Request,
    response: Option<Response>,
    timing: Option<EchoTiming>,
}

#[derive(Debug)]
enum Event {
    JobStart(usize),
    CoverSlot(NodeId),
    Delivered(usize),
    Returned(usize),
    ComputeDone(usize),
    BucketEdge(usize),
    Poll(usize, u64),
}

#[derive(Debug)]
struct EndpointState {
    pending: VecDeque<usize>,
    cover_rng: ChaCha20Rng,
}

#[derive(Debug)]
struct JobState {
    spec: JobSpec,
    client: NodeId,
    t_j: f64,
    write_in: WriteCapability,
    write_out: WriteCapability,
    read_out: ReadCapability,
    bob: NodeId,
    charlie: NodeId,
    ben: NodeId,
    fetch_courier: NodeId,

    input_boxes: Vec<BoxId>,
    pending: usize,
    stage_rtt: [f64; 5],

    ticket: Option<Ticket>,
    fetched_input: Vec<Option<Vec<u8>>>,
    epoch: Option<f64>,
    t_finish: f64,
    result: Option<Vec<u8>>,
    status: Option<BucketStatus>,
    released: bool,
    output_boxes: Vec<BoxId>,

    ack_time: Option<f64>,
    first_poll: Option<f64>,
    failed_polls: u32,
    out_count: Option<u32>,
    out_chunks: BTreeMap<u64, Vec<u8>>,
    outcome: Option<JobOutcome>,
}

/// A deterministic run of the inference pipeline over the simulated mixnet.
pub struct Simulation {
    cfg: SimConfig,
    grid: BucketGrid,
    cover: CoverSource,
    protocol_rng: ChaCha20Rng,
    mixnet: Mixnet,
    queue: EventQueue<Event>,
    placement: PlacementConfig,
    replicas: Vec<ReplicaStore>,
    couriers: BTreeMap<NodeId, Courier>,
    registry: CapabilityRegistry,
    endpoints: BTreeMap<NodeId, EndpointState>,
    jobs: Vec<JobState>,
    echoes: Vec<Echo>,
    open_jobs: usize,
    started: bool,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let topology = cfg.topology.build()?;
        let streams = RngStreams::new(cfg.seed);
        let mut mixnet = Mixnet::new(
            topology.clone(),
            DelayModel::new(cfg.mu)?,
            streams,
            cfg.payload_size,
        )?;
        mixnet.set_record_trace(cfg.record_trace);
        let placement = PlacementConfig::new(cfg.replicas_n, cfg.replicas_k, cfg.vnodes)?;
        let mut replicas = replica_set(cfg.replicas_n);
        for r in &cfg.offline_replicas {
            replicas[*r as usize].set_online(false);
        }
        let couriers = topology
            .storage_couriers
            .iter()
            .map(|&n| (n, Courier::new()))
            .collect();
        let endpoints = topology
            .clients
            .iter()
            .chain(&topology.compute_couriers)
            .map(|&n| {
                (
                    n,
                    EndpointState {
                        pending: VecDeque::new(),
                        cover_rng: streams.rng(Stream::Cover, u64::from(n.0)),
                    },
                )
            })
            .collect();
        Ok(Self {
            cover: CoverSource {
                lambda_s: cfg.lambda_s,
            },
            protocol_rng: streams.rng(Stream::Protocol, 0),
            grid,
            mixnet,
            queue: EventQueue::new(),
            placement,
            replicas,
            couriers,
            registry: CapabilityRegistry::new(),
            endpoints,
            jobs: Vec::new(),
            echoes: Vec::new(),
            open_jobs: 0,
            started: false,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        self.mixnet.topology()
    }

    pub fn placement(&self) -> &PlacementConfig {
        &self.placement
    }

    pub fn replicas(&self) -> &[ReplicaStore] {
        &self.replicas
    }

    pub fn couriers(&self) -> &BTreeMap<NodeId, Courier> {
        &self.couriers
    }

    pub fn registry(&self) -> &CapabilityRegistry {
        &self.registry
    }

    pub fn trace_stats(&self) -> TraceStats {
        self.mixnet.stats()
    }

    pub fn observer_view(&self) -> ObserverTrace {
        self.mixnet.observer_view()
    }

    pub fn mixnet(&self) -> &Mixnet {
        &self.mixnet
    }

    /// Registers a job. Capabilities are drawn (or checked for freshness)
    /// here, together with the job's courier choices.
    pub fn submit(&mut self, spec: JobSpec) -> Result<u64, ProtocolError> {
        if self.started {
            return Err(ProtocolError::Config("jobs must be submitted before run()".into()));
        }
        let topo = self.mixnet.topology().clone();
        let client = *topo.clients.get(spec.client).ok_or_else(|| {
            ProtocolError::Config(format!("client index {} out of range", spec.client))
        })?;
        let t_j = self.grid.edge(spec.bucket_index)?;
        if !(spec.start >= 0.0) {
            return Err(ProtocolError::Config("job start must be >= 0".into()));
        }
        if !(spec.compute.t_llm() >= 0.0) {
            return Err(ProtocolError::Config("compute time must be >= 0".into()));
        }

        let write_in = match &spec.write_in {
            Some(w) => w.clone(),
            None => generate_capability(&mut self.protocol_rng).0,
        };
        let write_out = match &spec.write_out {
            Some(w) => w.clone(),
            None => generate_capability(&mut self.protocol_rng).0,
        };
        if write_in.root_public_bytes() == write_out.root_public_bytes() {
            return Err(ProtocolError::FreshnessViolation(hex::encode(
                write_out.root_public_bytes(),
            )));
        }
        // Check both before registering either, so a rejected job leaves the
        // registry untouched.
        for w in [&write_in, &write_out] {
            if self.registry.contains(w) {
                return Err(ProtocolError::FreshnessViolation(hex::encode(w.root_public_bytes())));
            }
        }
        self.registry.register(&write_in)?;
        self.registry.register(&write_out)?;

        let rng = &mut self.protocol_rng;
        let bob = pick_uniform(rng, &topo.storage_couriers).expect("validated non-empty");
        let charlie = pick_uniform(rng, &topo.compute_couriers).expect("validated non-empty");
        let ben = pick_uniform(rng, &topo.storage_couriers).expect("validated non-empty");
        let fetch_courier = pick_uniform(rng, &topo.storage_couriers).expect("validated non-empty");

        let id = self.jobs.len();
        let read_out = write_out.read_capability();
        self.queue.schedule(spec.start, Event::JobStart(id));
        self.jobs.push(JobState {
            client,
            t_j,
            write_in,
            write_out,
            read_out,
            bob,
            charlie,
            ben,
            fetch_courier,
            input_boxes: Vec::new(),
            pending: 0,
            stage_rtt: [0.0; 5],
            ticket: None,
            fetched_input: Vec::new(),
            epoch: None,
            t_finish: 0.0,
            result: None,
            status: None,
            released: false,
            output_boxes: Vec::new(),
            ack_time: None,
            first_poll: None,
            failed_polls: 0,
            out_count: None,
            out_chunks: BTreeMap::new(),
            outcome: None,
            spec,
        });
        self.open_jobs += 1;
        Ok(id as u64)
    }

    /// Compute courier chosen for a job.
    pub fn compute_courier_of(&self, job: u64) -> Option<NodeId> {
        self.jobs.get(job as usize).map(|j| j.charlie)
    }

    /// Input-side and output-side Box-IDs written by a job.
    pub fn job_boxes(&self, job: u64) -> Option<(Vec<BoxId>, Vec<BoxId>)> {
        self.jobs
            .get(job as usize)
            .map(|j| (j.input_boxes.clone(), j.output_boxes.clone()))
    }

    /// Runs to quiescence and returns outcomes in job order.
    pub fn run(&mut self) -> Result<Vec<JobOutcome>, ProtocolError> {
        if !self.started {
            self.started = true;
            if self.cfg.cover && self.open_jobs > 0 {
                let eps: Vec<NodeId> = self.endpoints.keys().copied().collect();
                for ep in eps {
                    self.schedule_next_slot(ep);
                }
            }
        }
        while let Some((now, ev)) = self.queue.pop() {
            self.handle(now, ev)?;
        }
        if self.cfg.gossip {
            gossip_all(&mut self.replicas, &self.placement);
        }
        Ok(self
            .jobs
            .iter()
            .enumerate()
            .map(|(i, j)| {
                j.outcome.clone().unwrap_or_else(|| JobOutcome {
                    job_id: i as u64,
                    status: JobStatus::Failed("did not complete".into()),
                    release_time: 0.0,
                    result_boxes: Vec::new(),
                    t_finish: j.t_finish,
                    output: None,
                    latency: LatencyBreakdown::default(),
                })
            })
            .collect())
    }

    /// Application echoes with their stage labels, in launch order.
    pub fn echo_log(&self) -> Vec<EchoLogEntry> {
        let mut out: Vec<EchoLogEntry> = self
            .echoes
            .iter()
            .filter_map(|e| {
                let timing = e.timing.as_ref()?;
                Some(EchoLogEntry {
                    job_id: e.job? as u64,
                    stage: e.stage?,
                    index: e.index,
                    packet_id: timing.packet_id,
                    origin: e.origin,
                    destination: e.destination,
                    launched: timing.launched,
                    delivered: timing.delivered,
                    returned: timing.returned,
                    succeeded: !matches!(
                        e.response,
                        Some(Response::Storage(Ok(CourierReply::NotFound)))
                    ),
                })
            })
            .collect();
        out.sort_by_key(|e| e.packet_id);
        out
    }

    /// Store dumps of every replica, in replica order.
    pub fn store_dump_jsonl(&self) -> String {
        self.replicas.iter().map(|r| r.dump_jsonl()).collect()
    }

    fn handle(&mut self, now: f64, ev: Event) -> Result<(), ProtocolError> {
        match ev {
            Event::JobStart(j) => self.on_job_start(now, j),
            Event::CoverSlot(ep) => self.on_cover_slot(now, ep),
            Event::Delivered(e) => self.on_delivered(now, e),
            Event::Returned(e) => self.on_returned(now, e),
            Event::ComputeDone(j) => self.on_compute_done(now, j),
            Event::BucketEdge(j) => self.on_bucket_edge(now, j),
            Event::Poll(j, index) => self.on_poll(now, j, index),
        }
    }

    fn schedule_next_slot(&mut self, ep: NodeId) {
        let state = self.endpoints.get_mut(&ep).expect("known endpoint");
        if let Some(gap) = self.cover.next_gap(&mut state.cover_rng) {
            let t = self.queue.now() + gap;
            self.queue.schedule(t, Event::CoverSlot(ep));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn queue_echo(
        &mut self,
        now: f64,
        job: usize,
        stage: Stage,
        index: u64,
        origin: NodeId,
        destination: NodeId,
        payload_len: usize,
        request: Request,
    ) -> Result<(), ProtocolError> {
        let id = self.echoes.len();
        self.echoes.push(Echo {
            job: Some(job),
            stage: Some(stage),
            index,
            origin,
            destination,
            payload_len,
            request,
            response: None,
            timing: None,
        });
        if self.cfg.cover {
            self.endpoints
                .get_mut(&origin)
                .expect("echo origin is an endpoint")
                .pending
                .push_back(id);
            Ok(())
        } else {
            self.launch(now, id, PacketKind::Application)
        }
    }

    fn launch(&mut self, now: f64, echo: usize, kind: PacketKind) -> Result<(), ProtocolError> {
        let e = &self.echoes[echo];
        let packet = self
            .mixnet
            .make_packet(e.origin, e.destination, kind, e.payload_len)?;
        let timing = self.mixnet.send_echo(now, &packet);
        self.queue.schedule(timing.delivered, Event::Delivered(echo));
        self.queue.schedule(timing.returned, Event::Returned(echo));
        self.echoes[echo].timing = Some(timing);
        Ok(())
    }

    fn on_cover_slot(&mut self, now: f64, ep: NodeId) -> Result<(), ProtocolError> {
        if self.open_jobs == 0 {
            return Ok(());
        }
        let next = self.endpoints.get_mut(&ep).expect("known endpoint").pending.pop_front();
        match next {
            Some(echo) => self.launch(now, echo, PacketKind::Application)?,
            None => {
                let services: Vec<NodeId> = self.mixnet.topology().services().collect();
                let state = self.endpoints.get_mut(&ep).expect("known endpoint");
                let dest = services[state.cover_rng.gen_range(0..services.len())];
                let id = self.echoes.len();
                self.echoes.push(Echo {
                    job: None,
                    stage: None,
                    index: 0,
                    origin: ep,
                    destination: dest,
                    payload_len: 0,
                    request: Request::Loop,
                    response: None,
                    timing: None,
                });
                self.launch(now, id, PacketKind::LoopCover)?;
            }
        }
        self.schedule_next_slot(ep);
        Ok(())
    }

    fn on_job_start(&mut self, now: f64, j: usize) -> Result<(), ProtocolError> {
        let chunk_bytes = self.cfg.payload_size;
        let job = &self.jobs[j];
        let chunks: Vec<Vec<u8>> = chunk_input(&job.spec.input, chunk_bytes)
            .into_iter()
            .map(<[u8]>::to_vec)
            .collect();
        let (client, bob) = (job.client, job.bob);
        let write_in = job.write_in.clone();
        let mut sends = Vec::with_capacity(chunks.len());
        let mut boxes = Vec::with_capacity(chunks.len());
        for (i, chunk) in chunks.iter().enumerate() {
            let keys = derive_box(&write_in, i as u64 + 1, CTX_IN)?;
            let record = seal_with_keys(&keys, chunk)?;
            boxes.push(record.box_id);
            let env = Envelope::put(record, &self.placement, self.echoes.len() as u64 + i as u64);
            sends.push((i as u64 + 1, chunk.len(), env));
        }
        let job = &mut self.jobs[j];
        job.input_boxes = boxes;
        job.pending = sends.len();
        for (index, len, env) in sends {
            self.queue_echo(now, j, Stage::Upload, index, client, bob, len, Request::Storage(env))?;
        }
        Ok(())
    }

    fn on_delivered(&mut self, now: f64, e: usize) -> Result<(), ProtocolError> {
        let dest = self.echoes[e].destination;
        let response = match &self.echoes[e].request {
            Request::Loop => Response::Loop,
            Request::Storage(env) => {
                let courier = self.couriers.get_mut(&dest).expect("storage echo targets a courier");
                Response::Storage(courier.forward(now, env, &mut self.replicas))
            }
            Request::Dispatch(ticket) => {
                let ticket = (**ticket).clone();
                self.start_compute_fetch(now, ticket)?;
                Response::DispatchAck
            }
        };
        self.echoes[e].response = Some(response);
        Ok(())
    }

    fn start_compute_fetch(&mut self, now: f64, ticket: Ticket) -> Result<(), ProtocolError> {
        let j = ticket.job;
        let charlie = self.jobs[j].charlie;
        let mut sends = Vec::with_capacity(ticket.chunk_count);
        for i in 1..=ticket.chunk_count as u64 {
            let keys = derive_box(&ticket.read_in, i, CTX_IN)?;
            sends.push((i, Envelope::get(keys.box_id, &self.placement, i)));
        }
        let job = &mut self.jobs[j];
        job.pending = sends.len();
        job.fetched_input = vec![None; ticket.chunk_count];
        let courier = ticket.input_courier;
        job.ticket = Some(ticket);
        for (index, env) in sends {
            self.queue_echo(now, j, Stage::ComputeFetch, index, charlie, courier, GET_BYTES, Request::Storage(env))?;
        }
        Ok(())
    }

    fn fail(&mut self, j: usize, now: f64, why: String) {
        let job = &mut self.jobs[j];
        if job.outcome.is_some() {
            return;
        }
        job.outcome = Some(JobOutcome {
            job_id: j as u64,
            status: JobStatus::Failed(why),
            release_time: 0.0,
            result_boxes: Vec::new(),
            t_finish: job.t_finish,
            output: None,
            latency: LatencyBreakdown {
                wall_clock: now - job.spec.start,
                failed_polls: job.failed_polls,
                ..LatencyBreakdown::default()
            },
        });
        self.open_jobs -= 1;
    }

    fn on_returned(&mut self, now: f64, e: usize) -> Result<(), ProtocolError> {
        let echo = &self.echoes[e];
        let (Some(j), Some(stage)) = (echo.job, echo.stage) else {
            return Ok(());
        };
        let rtt = echo.timing.as_ref().map_or(0.0, EchoTiming::round_trip);
        let index = echo.index;
        let stored = matches!(echo.response, Some(Response::Storage(Ok(CourierReply::Put { .. }))));
        if let Some(outcome) = &mut self.jobs[j].outcome {
            // The client may fetch the result before the compute side's
            // store echo has come back; its round trip still counts.
            if stage == Stage::ComputeStore && stored && !matches!(outcome.status, JobStatus::Failed(_)) {
                let job = &mut self.jobs[j];
                let slot = &mut job.stage_rtt[Stage::ComputeStore.slot()];
                *slot = slot.max(rtt);
                let outcome = job.outcome.as_mut().expect("checked above");
                outcome.latency.echoes = job.stage_rtt;
                outcome.latency.mix_time = job.stage_rtt.iter().sum();
                outcome.latency.total = outcome.latency.mix_time + outcome.latency.compute_bucket_time;
            }
            return Ok(());
        }
        let response = echo.response.clone().expect("delivered before returned");
        match (stage, response) {
            (Stage::Upload, Response::Storage(Ok(CourierReply::Put { .. }))) => {
                let job = &mut self.jobs[j];
                job.stage_rtt[Stage::Upload.slot()] = job.stage_rtt[Stage::Upload.slot()].max(rtt);
                job.pending -= 1;
                if job.pending == 0 {
                    let ticket = Ticket {
                        job: j,
                        read_in: job.write_in.read_capability(),
                        write_out: job.write_out.clone(),
                        bucket_index: job.spec.bucket_index,
                        chunk_count: job.input_boxes.len(),
                        input_courier: job.bob,
                    };
                    let (client, charlie) = (job.client, job.charlie);
                    self.queue_echo(now, j, Stage::Dispatch, 0, client, charlie, TICKET_BYTES, Request::Dispatch(Box::new(ticket)))?;
                }
            }
            (Stage::Dispatch, Response::DispatchAck) => {
                let job = &mut self.jobs[j];
                job.stage_rtt[Stage::Dispatch.slot()] = rtt;
                job.ack_time = Some(now);
                let offset = self.cfg.first_poll_offset.unwrap_or(if self.cfg.bucketing {
                    job.t_j + 2.0 * HOPS_PER_ECHO as f64 * self.cfg.mu
                } else {
                    self.cfg.delta
                });
                self.queue.schedule(now + offset.max(0.0), Event::Poll(j, 1));
            }
            (Stage::ComputeFetch, Response::Storage(Ok(CourierReply::Found(record)))) => {
                let keys = {
                    let ticket = self.jobs[j].ticket.as_ref().expect("dispatched");
                    derive_box(&ticket.read_in, index, CTX_IN)?
                };
                match open_with_keys(&keys, &record) {
                    Ok(plain) => {
                        let job = &mut self.jobs[j];
                        job.stage_rtt[Stage::ComputeFetch.slot()] =
                            job.stage_rtt[Stage::ComputeFetch.slot()].max(rtt);
                        job.fetched_input[index as usize - 1] = Some(plain);
                        job.pending -= 1;
                        if job.pending == 0 {
                            self.start_compute(now, j);
                        }
                    }
                    Err(err) => self.fail(j, now, format!("input box {index}: {err}")),
                }
            }
            (Stage::ComputeFetch, Response::Storage(Ok(_))) => {
                self.fail(j, now, format!("input box {index} not found on any replica"))
            }
            (Stage::ComputeStore, Response::Storage(Ok(CourierReply::Put { .. }))) => {
                let job = &mut self.jobs[j];
                job.stage_rtt[Stage::ComputeStore.slot()] =
                    job.stage_rtt[Stage::ComputeStore.slot()].max(rtt);
                job.pending -= 1;
            }
            (Stage::Fetch, Response::Storage(Ok(CourierReply::NotFound))) => {
                let budget = 3.0 * self.grid.last_edge();
                let job = &mut self.jobs[j];
                job.failed_polls += 1;
                let first = job.first_poll.unwrap_or(now);
                if now - first > budget {
                    let polls = job.failed_polls;
                    self.fail(j, now, format!("fetch timeout after {polls} polls"));
                } else {
                    self.queue.schedule(now + self.cfg.delta, Event::Poll(j, index));
                }
            }
            (Stage::Fetch, Response::Storage(Ok(CourierReply::Found(record)))) => {
                self.on_output_box(now, j, index, rtt, &record)?;
            }
            (stage, Response::Storage(Err(err))) => {
                self.fail(j, now, format!("{stage:?} echo: {err}"));
            }
            (stage, _) => {
                self.fail(j, now, format!("{stage:?} echo: unexpected reply"));
            }
        }
        Ok(())
    }

    fn start_compute(&mut self, now: f64, j: usize) {
        let bucketing = self.cfg.bucketing;
        let job = &mut self.jobs[j];
        let input: Vec<u8> = job.fetched_input.drain(..).flatten().flatten().collect();
        job.epoch = Some(now);
        job.t_finish = job.spec.compute.t_llm();
        job.result = Some(job.spec.compute.stub.call(&input));
        let bucket = job.ticket.as_ref().expect("dispatched").bucket_index;
        let t_j = self.grid.edge(bucket).expect("checked at submit");
        let t_finish = job.t_finish;
        self.queue.schedule(now + t_finish, Event::ComputeDone(j));
        if bucketing {
            self.queue.schedule(now + t_j, Event::BucketEdge(j));
        }
    }

    fn on_compute_done(&mut self, now: f64, j: usize) -> Result<(), ProtocolError> {
        if self.cfg.bucketing || self.jobs[j].outcome.is_some() {
            return Ok(());
        }
        self.release(now, j, BucketStatus::Ok)
    }

    fn on_bucket_edge(&mut self, now: f64, j: usize) -> Result<(), ProtocolError> {
        if self.jobs[j].outcome.is_some() {
            return Ok(());
        }
        let job = &self.jobs[j];
        let bucket = job.ticket.as_ref().expect("dispatched").bucket_index;
        let t_j = self.grid.edge(bucket)?;
        let (status, _) = wait_for_bucket_edge(&self.grid, t_j, job.t_finish)?;
        self.release(now, j, status)
    }

    fn release(&mut self, now: f64, j: usize, status: BucketStatus) -> Result<(), ProtocolError> {
        let box_bytes = self.cfg.payload_size;
        let job = &mut self.jobs[j];
        debug_assert!(!job.released, "a job releases once");
        job.released = true;
        job.status = Some(status);
        let ticket = job.ticket.as_ref().expect("dispatched before release");
        let payloads = match status {
            BucketStatus::Ok => frame_output(job.result.as_deref().unwrap_or_default(), box_bytes),
            BucketStatus::Overflow => vec![overflow_marker()],
        };
        let write_out = ticket.write_out.clone();
        let mut sends = Vec::with_capacity(payloads.len());
        for (i, p) in payloads.iter().enumerate() {
            let keys = derive_box(&write_out, i as u64 + 1, CTX_OUT)?;
            let record = seal_with_keys(&keys, p)?;
            job.output_boxes.push(record.box_id);
            sends.push((i as u64 + 1, p.len(), Envelope::put(record, &self.placement, i as u64)));
        }
        job.pending = sends.len();
        let (charlie, ben) = (job.charlie, job.ben);
        for (index, len, env) in sends {
            self.queue_echo(now, j, Stage::ComputeStore, index, charlie, ben, len, Request::Storage(env))?;
        }
        Ok(())
    }

    fn on_poll(&mut self, now: f64, j: usize, index: u64) -> Result<(), ProtocolError> {
        let job = &mut self.jobs[j];
        if job.outcome.is_some() {
            return Ok(());
        }
        job.first_poll.get_or_insert(now);
        let keys = derive_box(&job.read_out, index, CTX_OUT)?;
        let env = Envelope::get(keys.box_id, &self.placement, index);
        let (client, courier) = (job.client, job.fetch_courier);
        self.queue_echo(now, j, Stage::Fetch, index, client, courier, GET_BYTES, Request::Storage(env))
    }

    fn on_output_box(
        &mut self,
        now: f64,
        j: usize,
        index: u64,
        rtt: f64,
        record: &crate::bacap::BoxRecord,
    ) -> Result<(), ProtocolError> {
        let keys = derive_box(&self.jobs[j].read_out, index, CTX_OUT)?;
        let plain = match open_with_keys(&keys, record) {
            Ok(p) => p,
            Err(err) => {
                self.fail(j, now, format!("integrity error on output box {index}: {err}"));
                return Ok(());
            }
        };
        let parsed = match parse_output_box(&plain) {
            Ok(p) => p,
            Err(err) => {
                self.fail(j, now, format!("output box {index}: {err}"));
                return Ok(());
            }
        };
        let job = &mut self.jobs[j];
        job.stage_rtt[Stage::Fetch.slot()] = job.stage_rtt[Stage::Fetch.slot()].max(rtt);
        match parsed {
            OutputBox::Overflow => self.finish(now, j, JobStatus::Overflow, None),
            OutputBox::Data { count, data } => {
                job.out_chunks.insert(index, data);
                if job.out_count.is_none() {
                    job.out_count = Some(count);
                    for i in 2..=u64::from(count) {
                        self.queue.schedule(now, Event::Poll(j, i));
                    }
                }
                let job = &self.jobs[j];
                if job.out_chunks.len() == count as usize {
                    let output: Vec<u8> = job.out_chunks.values().flatten().copied().collect();
                    self.finish(now, j, JobStatus::Ok, Some(output));
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self, now: f64, j: usize, status: JobStatus, output: Option<Vec<u8>>) {
        let bucketing = self.cfg.bucketing;
        let job = &mut self.jobs[j];
        let compute_bucket_time = if bucketing { job.t_j } else { job.t_finish };
        let mix_time: f64 = job.stage_rtt.iter().sum();
        job.outcome = Some(JobOutcome {
            job_id: j as u64,
            result_boxes: if status == JobStatus::Ok {
                job.output_boxes.clone()
            } else {
                Vec::new()
            },
            status,
            release_time: compute_bucket_time,
            t_finish: job.t_finish,
            output,
            latency: LatencyBreakdown {
                echoes: job.stage_rtt,
                mix_time,
                compute_bucket_time,
                total: mix_time + compute_bucket_time,
                wall_clock: now - job.spec.start,
                failed_polls: job.failed_polls,
            },
        });
        self.open_jobs -= 1;
    }
}
