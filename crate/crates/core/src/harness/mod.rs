//! Experiment drivers: configuration, end-to-end runs, the unlinkability
//! distinguisher, table emission and BACAP vectors. Everything here writes
//! deterministic files for a given seed.

mod iou;
mod tables;
mod vectors;

pub use iou::{adversary_guess, default_iou_config, run_iou_experiment, AccessFeatures, DistinguisherReport, FEATURES};
pub use tables::{check_tables, emit_tables, TableFiles};
pub use vectors::{bacap_vectors, write_bacap_vectors, VectorLine};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixnet::{RngStreams, Stream, TraceStats};
use crate::protocol::{
    ComputeModel, JobOutcome, JobSpec, JobStatus, OutcomeRecord, ProtocolError, SimConfig,
    Simulation, StubFn, TopologySpec, TOKEN_BYTES,
};
use crate::stats::mean_var;

/// Jobs per independent simulator instance in large runs.
pub const SHARD_JOBS: u64 = 1000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Protocol(ProtocolError::Config(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaSpec {
    pub n: usize,
    pub k: usize,
    pub v: usize,
}

impl Default for ReplicaSpec {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            n: d.replicas_n,
            k: d.replicas_k,
            v: d.vnodes,
        }
    }
}

/// One configured job, optionally repeated `count` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    /// Client index; defaults to round-robin over clients.
    pub client: Option<usize>,
    pub bucket_index: u32,
    /// Seconds.
    pub ttft: f64,
    /// Seconds per output token.
    pub itl: f64,
    pub n_out: u32,
    pub input_tokens: usize,
    /// Seed for the input bytes; defaults to the job's position.
    pub seed: Option<u64>,
    pub stub: String,
    pub start: f64,
    pub count: u64,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            client: None,
            bucket_index: 1,
            ttft: 0.0,
            itl: 0.0,
            n_out: 0,
            input_tokens: 16,
            seed: None,
            stub: "identity".into(),
            start: 0.0,
            count: 1,
        }
    }
}

impl JobConfig {
    pub fn t_llm(&self) -> f64 {
        self.ttft + f64::from(self.n_out) * self.itl
    }
}

/// Complete description of a run, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub topology: TopologySpec,
    pub mu: f64,
    pub lambda_s: f64,
    pub cover: bool,
    pub delta: f64,
    pub grid_n: u32,
    pub replicas: ReplicaSpec,
    pub payload_size: usize,
    pub bucketing: bool,
    /// Write the observer trace and store dumps.
    pub trace: bool,
    pub gossip: bool,
    pub offline_replicas: Vec<u32>,
    pub jobs: Vec<JobConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            seed: d.seed,
            topology: d.topology,
            mu: d.mu,
            lambda_s: d.lambda_s,
            cover: d.cover,
            delta: d.delta,
            grid_n: d.grid_n,
            replicas: ReplicaSpec::default(),
            payload_size: d.payload_size,
            bucketing: d.bucketing,
            trace: true,
            gossip: d.gossip,
            offline_replicas: d.offline_replicas,
            jobs: vec![JobConfig::default()],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            seed,
            mu: self.mu,
            lambda_s: self.lambda_s,
            cover: self.cover,
            delta: self.delta,
            grid_n: self.grid_n,
            replicas_n: self.replicas.n,
            replicas_k: self.replicas.k,
            vnodes: self.replicas.v,
            topology: self.topology,
            payload_size: self.payload_size,
            bucketing: self.bucketing,
            record_trace: self.trace,
            gossip: self.gossip,
            offline_replicas: self.offline_replicas.clone(),
            first_poll_offset: None,
        }
    }

    pub fn total_jobs(&self) -> u64 {
        self.jobs.iter().map(|j| j.count).sum()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sim_config(self.seed)
            .validate()
            .map_err(|e| match e {
                ProtocolError::Config(m) => HarnessError::Config(m),
                other => other.into(),
            })?;
        let max_tokens = self.payload_size / TOKEN_BYTES;
        for (i, j) in self.jobs.iter().enumerate() {
            let field = |name: &str, msg: String| Err(HarnessError::Config(format!("jobs[{i}].{name}: {msg}")));
            if j.bucket_index == 0 || j.bucket_index > self.grid_n {
                return field("bucket_index", format!("must be in 1..={}, got {}", self.grid_n, j.bucket_index));
            }
            if !(j.ttft >= 0.0 && j.ttft.is_finite()) {
                return field("ttft", format!("must be >= 0, got {}", j.ttft));
            }
            if !(j.itl >= 0.0 && j.itl.is_finite()) {
                return field("itl", format!("must be >= 0, got {}", j.itl));
            }
            if !(j.start >= 0.0 && j.start.is_finite()) {
                return field("start", format!("must be >= 0, got {}", j.start));
            }
            if j.count == 0 {
                return field("count", "must be >= 1".into());
            }
            if StubFn::by_name(&j.stub).is_none() {
                return field("stub", format!("unknown stub {:?} (identity, reverse, empty)", j.stub));
            }
            if let Some(c) = j.client {
                if c >= self.topology.clients {
                    return field("client", format!("must be < {} clients, got {c}", self.topology.clients));
                }
            }
            // Inputs may span several boxes, but keep runs bounded.
            if j.input_tokens > 1000 * max_tokens {
                return field("input_tokens", format!("at most {} supported", 1000 * max_tokens));
            }
        }
        Ok(())
    }

    /// Expands job entries into `(global index, entry)` pairs.
    fn job_list(&self) -> Vec<(u64, &JobConfig)> {
        let mut out = Vec::with_capacity(self.total_jobs() as usize);
        let mut g = 0;
        for j in &self.jobs {
            for _ in 0..j.count {
                out.push((g, j));
                g += 1;
            }
        }
        out
    }
}

/// Deterministic input bytes for a job.
pub fn job_input(run_seed: u64, job_index: u64, cfg: &JobConfig) -> Vec<u8> {
    let streams = RngStreams::new(run_seed);
    let mut rng = streams.rng(Stream::Workload, cfg.seed.unwrap_or(job_index));
    let mut input = vec![0u8; cfg.input_tokens * TOKEN_BYTES];
    rng.fill_bytes(&mut input);
    input
}

pub fn job_spec(run: &RunConfig, job_index: u64, cfg: &JobConfig) -> JobSpec {
    let stub = StubFn::by_name(&cfg.stub).expect("validated");
    let compute = ComputeModel::new(cfg.ttft, cfg.itl, cfg.n_out, stub);
    let client = cfg.client.unwrap_or(job_index as usize % run.topology.clients);
    JobSpec::new(client, job_input(run.seed, job_index, cfg), cfg.bucket_index, compute)
        .starting_at(cfg.start)
}

/// Files and statistics of one shard.
struct ShardResult {
    outcomes: Vec<JobOutcome>,
    stats: TraceStats,
    trace_jsonl: String,
    stores_jsonl: String,
    courier_jsonl: String,
    echo_log_jsonl: String,
    output_mismatches: u64,
}

fn shard_seed(run_seed: u64, shard: u64, shards: u64) -> u64 {
    if shards == 1 {
        run_seed
    } else {
        RngStreams::new(run_seed).rng(Stream::Trial, shard).gen()
    }
}

fn run_shard(run: &RunConfig, seed: u64, jobs: &[(u64, &JobConfig)]) -> Result<ShardResult, HarnessError> {
    let mut sim = Simulation::new(run.sim_config(seed))?;
    let mut expected = Vec::with_capacity(jobs.len());
    for (g, j) in jobs {
        let spec = job_spec(run, *g, j);
        expected.push(spec.compute.stub.call(&spec.input));
        sim.submit(spec)?;
    }
    let mut outcomes = sim.run()?;
    let mut output_mismatches = 0;
    for ((g, _), (o, want)) in jobs.iter().zip(outcomes.iter_mut().zip(&expected)) {
        o.job_id = *g;
        if o.status == JobStatus::Ok && o.output.as_ref() != Some(want) {
            output_mismatches += 1;
        }
    }
    let mut result = ShardResult {
        outcomes,
        stats: sim.trace_stats(),
        trace_jsonl: String::new(),
        stores_jsonl: String::new(),
        courier_jsonl: String::new(),
        echo_log_jsonl: String::new(),
        output_mismatches,
    };
    if run.trace {
        result.trace_jsonl = sim.observer_view().to_jsonl();
        result.stores_jsonl = sim.store_dump_jsonl();
        for (node, c) in sim.couriers() {
            for line in c.log_jsonl().lines() {
                result.courier_jsonl.push_str(&format!("{{\"courier\":{},{}\n", node.0, &line[1..]));
            }
        }
        for e in sim.echo_log() {
            let mut e = e;
            e.job_id = jobs[e.job_id as usize].0;
            result.echo_log_jsonl.push_str(&serde_json::to_string(&e).expect("serializes"));
            result.echo_log_jsonl.push('\n');
        }
    }
    Ok(result)
}

/// Aggregate of an end-to-end run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eSummary {
    pub seed: u64,
    pub jobs: u64,
    pub shards: u64,
    pub ok: u64,
    pub overflow: u64,
    pub failed: u64,
    /// Ok jobs whose fetched output differed from the stub applied to the input.
    pub output_mismatches: u64,
    pub mix_time_mean: f64,
    pub mix_time_var: f64,
    pub trace_events: u64,
    pub size_violations: u64,
}

#[derive(Debug, Clone)]
pub struct E2eRun {
    pub summary: E2eSummary,
    pub outcomes: Vec<JobOutcome>,
}

impl E2eRun {
    pub fn mix_times(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.latency.mix_time).collect()
    }
}

/// Runs every configured job and, with `out_dir`, writes `outcomes.jsonl`,
/// `summary.json` and (when tracing) `trace.jsonl`, `stores.jsonl`,
/// `couriers.jsonl`, `echoes.jsonl`. Runs larger than [`SHARD_JOBS`] are
/// split into independently seeded simulator instances.
pub fn run_e2e(run: &RunConfig, out_dir: Option<&Path>) -> Result<E2eRun, HarnessError> {
    run.validate()?;
    let jobs = run.job_list();
    let shards = (jobs.len() as u64).div_ceil(SHARD_JOBS).max(1);
    let results: Vec<ShardResult> = jobs
        .chunks(SHARD_JOBS as usize)
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, chunk)| run_shard(run, shard_seed(run.seed, i as u64, shards), chunk))
        .collect::<Result<_, _>>()?;

    let mut outcomes = Vec::with_capacity(jobs.len());
    let mut stats = TraceStats::default();
    let mut mismatches = 0;
    for r in &results {
        stats.events += r.stats.events;
        stats.size_violations += r.stats.size_violations;
        mismatches += r.output_mismatches;
    }
    let count = |s: &str| -> u64 { results.iter().flat_map(|r| &r.outcomes).filter(|o| o.status.as_str() == s).count() as u64 };
    let (ok, overflow, failed) = (count("ok"), count("overflow"), count("failed"));
    let mix: Vec<f64> = results
        .iter()
        .flat_map(|r| &r.outcomes)
        .filter(|o| !matches!(o.status, JobStatus::Failed(_)))
        .map(|o| o.latency.mix_time)
        .collect();
    let (mean, var) = mean_var(&mix);
    let summary = E2eSummary {
        seed: run.seed,
        jobs: jobs.len() as u64,
        shards,
        ok,
        overflow,
        failed,
        output_mismatches: mismatches,
        mix_time_mean: if mix.is_empty() { 0.0 } else { mean },
        mix_time_var: if mix.is_empty() { 0.0 } else { var },
        trace_events: stats.events,
        size_violations: stats.size_violations,
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write_lines = |name: &str, parts: &mut dyn Iterator<Item = &str>| -> Result<(), HarnessError> {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            for p in parts {
                w.write_all(p.as_bytes()).map_err(io_err(&path))?;
            }
            w.flush().map_err(io_err(&path))
        };
        let outcome_lines: Vec<String> = results
            .iter()
            .flat_map(|r| &r.outcomes)
            .map(|o| serde_json::to_string(&OutcomeRecord::from(o)).expect("serializes") + "\n")
            .collect();
        write_lines("outcomes.jsonl", &mut outcome_lines.iter().map(String::as_str))?;
        let summary_json = serde_json::to_string_pretty(&summary).expect("serializes") + "\n";
        write_lines("summary.json", &mut std::iter::once(summary_json.as_str()))?;
        if run.trace {
            write_lines("trace.jsonl", &mut results.iter().map(|r| r.trace_jsonl.as_str()))?;
            write_lines("stores.jsonl", &mut results.iter().map(|r| r.stores_jsonl.as_str()))?;
            write_lines("couriers.jsonl", &mut results.iter().map(|r| r.courier_jsonl.as_str()))?;
            write_lines("echoes.jsonl", &mut results.iter().map(|r| r.echo_log_jsonl.as_str()))?;
        }
    }
    outcomes.extend(results.into_iter().flat_map(|r| r.outcomes));
    Ok(E2eRun { summary, outcomes })
}
