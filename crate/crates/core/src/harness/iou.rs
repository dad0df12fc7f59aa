//! Empirical input/output unlinkability game.
//!
//! Two clients `S0`, `S1` submit jobs `A` and `B`. The challenger flips `b`;
//! in world `b = 0` client `S0` runs `A` and `S1` runs `B`, in world `b = 1`
//! the pairing is swapped. The adversary sees only the observer trace of the
//! chosen world and the public job parameters, and guesses `b`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{job_input, HarnessError, JobConfig, RunConfig};
use crate::mixnet::{NodeId, ObserverTrace, RngStreams, Stream};
use crate::protocol::{ComputeModel, JobSpec, Simulation, StubFn};
use crate::stats::clopper_pearson;

/// Features the built-in adversary computes per client access link.
pub const FEATURES: [&str; 3] = ["last_event_time", "packet_count", "max_inter_event_gap"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinguisherReport {
    pub trials: u64,
    pub correct: u64,
    pub adversary_accuracy: f64,
    /// Exact binomial 95% interval.
    pub confidence_interval: (f64, f64),
    pub features: Vec<String>,
    pub bucketing: bool,
    /// Trials where both pairings produced the same observer trace.
    pub identical_view_fraction: f64,
}

impl DistinguisherReport {
    pub fn ci_contains(&self, p: f64) -> bool {
        self.confidence_interval.0 <= p && p <= self.confidence_interval.1
    }
}

/// What the observer sees on the link between one client and its gateway.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AccessFeatures {
    pub last_event_time: f64,
    pub packet_count: u64,
    pub max_inter_event_gap: f64,
}

impl AccessFeatures {
    pub fn of(trace: &ObserverTrace, client: NodeId) -> Self {
        let mut f = Self::default();
        let mut prev: Option<f64> = None;
        for e in trace.links_of(client) {
            f.packet_count += 1;
            f.last_event_time = e.t;
            if let Some(p) = prev {
                f.max_inter_event_gap = f.max_inter_event_gap.max(e.t - p);
            }
            prev = Some(e.t);
        }
        f
    }
}

/// Guesses `b` from the trace. The adversary knows which job computes
/// longer (`a_slower`) and assumes its client finishes later, sends more
/// packets and waits longer between them. The first feature that differs
/// decides; a full tie guesses 0.
pub fn adversary_guess(trace: &ObserverTrace, s0: NodeId, s1: NodeId, a_slower: bool) -> u8 {
    let f0 = AccessFeatures::of(trace, s0);
    let f1 = AccessFeatures::of(trace, s1);
    let diffs = [
        f0.last_event_time - f1.last_event_time,
        f0.packet_count as f64 - f1.packet_count as f64,
        f0.max_inter_event_gap - f1.max_inter_event_gap,
    ];
    match diffs.iter().find(|d| **d != 0.0) {
        // S0 looks slower, so S0 ran the slower job.
        Some(d) if (*d > 0.0) == a_slower => 0,
        Some(_) => 1,
        None => 0,
    }
}

/// Two identity jobs in bucket 100 (20 s) whose compute times differ by
/// 10 s.
pub fn default_iou_config() -> RunConfig {
    let job = |ttft: f64| JobConfig {
        bucket_index: 100,
        ttft,
        input_tokens: 64,
        ..JobConfig::default()
    };
    RunConfig {
        jobs: vec![job(1.0), job(11.0)],
        ..RunConfig::default()
    }
}

fn overflow_flag(run: &RunConfig, j: &JobConfig) -> bool {
    j.t_llm() >= f64::from(j.bucket_index) * run.delta
}

fn check(run: &RunConfig) -> Result<(&JobConfig, &JobConfig), HarnessError> {
    run.validate()?;
    let cfg = |m: String| HarnessError::Config(m);
    if run.jobs.len() != 2 || run.jobs.iter().any(|j| j.count != 1) {
        return Err(cfg("jobs: the experiment needs exactly two single jobs (A and B)".into()));
    }
    if run.topology.clients < 2 {
        return Err(cfg("topology.clients: the experiment needs two clients".into()));
    }
    let (a, b) = (&run.jobs[0], &run.jobs[1]);
    if run.bucketing {
        if a.bucket_index != b.bucket_index {
            return Err(cfg(format!(
                "jobs: bucket indices differ ({} vs {}); the game needs matched (j, o)",
                a.bucket_index, b.bucket_index
            )));
        }
        if overflow_flag(run, a) != overflow_flag(run, b) {
            return Err(cfg("jobs: overflow flags differ; the game needs matched (j, o)".into()));
        }
    }
    let max_tokens = run.payload_size / crate::protocol::TOKEN_BYTES;
    let boxes = |j: &JobConfig| j.input_tokens.div_ceil(max_tokens).max(1);
    if boxes(a) != boxes(b) || a.stub != b.stub {
        return Err(cfg("jobs: inputs must span the same number of boxes and use the same stub".into()));
    }
    Ok((a, b))
}

/// Runs one world and returns its observer trace.
fn world(run: &RunConfig, seed: u64, b: u8, jobs: [&JobConfig; 2]) -> Result<ObserverTrace, HarnessError> {
    let mut sim_cfg = run.sim_config(seed);
    sim_cfg.record_trace = true;
    sim_cfg.gossip = false;
    let mut sim = Simulation::new(sim_cfg)?;
    let order = if b == 0 { [0, 1] } else { [1, 0] };
    for (client, &which) in order.iter().enumerate() {
        let j = jobs[which];
        let stub = StubFn::by_name(&j.stub).expect("validated");
        let spec = JobSpec::new(
            client,
            job_input(seed, which as u64, j),
            j.bucket_index,
            ComputeModel::new(j.ttft, j.itl, j.n_out, stub),
        )
        .starting_at(j.start);
        sim.submit(spec)?;
    }
    sim.run()?;
    Ok(sim.observer_view())
}

/// Plays `trials` rounds of the game. With bucketing on, the two jobs must
/// agree on bucket index and overflow flag.
pub fn run_iou_experiment(run: &RunConfig, trials: u64) -> Result<DistinguisherReport, HarnessError> {
    let (a, b) = check(run)?;
    let topo = run.topology.build()?;
    let (s0, s1) = (topo.clients[0], topo.clients[1]);
    let a_slower = a.t_llm() > b.t_llm();
    let streams = RngStreams::new(run.seed);

    let results: Vec<(bool, bool)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = streams.rng(Stream::Trial, t);
            let seed: u64 = rng.gen();
            let bit: u8 = rng.gen_range(0..2);
            let seen = world(run, seed, bit, [a, b])?;
            let other = world(run, seed, 1 - bit, [a, b])?;
            let guess = adversary_guess(&seen, s0, s1, a_slower);
            Ok((guess == bit, seen == other))
        })
        .collect::<Result<_, HarnessError>>()?;

    let correct = results.iter().filter(|r| r.0).count() as u64;
    let identical = results.iter().filter(|r| r.1).count() as u64;
    let frac = |k: u64| if trials == 0 { 0.0 } else { k as f64 / trials as f64 };
    Ok(DistinguisherReport {
        trials,
        correct,
        adversary_accuracy: frac(correct),
        confidence_interval: clopper_pearson(correct, trials, 0.95),
        features: FEATURES.iter().map(|s| s.to_string()).collect(),
        bucketing: run.bucketing,
        identical_view_fraction: frac(identical),
    })
}
