//! The five-echo store → compute → store inference workflow.
//!
//! | Echo | Who | What |
//! |------|-----|------|
//! | Upload | client → storage courier | input chunks sealed under `W_in`, `CTX_IN` |
//! | Dispatch | client → compute courier | ticket `(R_in, W_out, j)` |
//! | Compute-fetch | compute → storage courier | inputs read with `R_in` |
//! | Compute-store | compute → storage courier | outputs sealed under `W_out`, `CTX_OUT` |
//! | Fetch | client → storage courier | outputs read with `R_out` |
//!
//! Output chains use a small framing so the reader knows when to stop and
//! can tell an OVERFLOW marker from data: every data box starts with a zero
//! tag byte and the big-endian `u32` number of output boxes; the overflow
//! marker is the single byte `0xFF` at index 1.

pub mod bucket;
mod pipeline;

pub use bucket::{round_up_to_bucket, wait_for_bucket_edge, BucketGrid, BucketStatus};
pub use pipeline::{
    EchoLogEntry, JobSpec, SimConfig, Simulation, Stage, TopologySpec,
};

use crate::bacap::{BacapError, WriteCapability, MAX_PLAINTEXT};
use crate::mixnet::MixnetError;
use crate::pigeonhole::PigeonholeError;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Bytes per token of a tokenized prompt.
pub const TOKEN_BYTES: usize = 4;
/// Tokens that fit a single input box.
pub const MAX_TOKENS_PER_CHUNK: usize = MAX_PLAINTEXT / TOKEN_BYTES;

const TAG_DATA: u8 = 0x00;
const TAG_OVERFLOW: u8 = 0xFF;
/// Tag byte plus chunk count.
pub const OUTPUT_HEADER_LEN: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("write capability {0} was already used by another job")]
    FreshnessViolation(String),
    #[error(transparent)]
    Bacap(#[from] BacapError),
    #[error(transparent)]
    Mixnet(#[from] MixnetError),
    #[error(transparent)]
    Pigeonhole(#[from] PigeonholeError),
    #[error("malformed output box: {0}")]
    BadFraming(&'static str),
}

/// Splits an input into box-sized chunks. Empty input is one empty chunk.
pub fn chunk_input(input: &[u8], chunk_bytes: usize) -> Vec<&[u8]> {
    assert!(chunk_bytes > 0);
    if input.is_empty() {
        return vec![input];
    }
    input.chunks(chunk_bytes).collect()
}

/// Number of input boxes for `tokens` tokens.
pub fn chunks_for_tokens(tokens: usize) -> usize {
    tokens.div_ceil(MAX_TOKENS_PER_CHUNK).max(1)
}

/// Frames a result into output boxes of at most `box_bytes` each.
pub fn frame_output(result: &[u8], box_bytes: usize) -> Vec<Vec<u8>> {
    assert!(box_bytes > OUTPUT_HEADER_LEN);
    let room = box_bytes - OUTPUT_HEADER_LEN;
    let pieces: Vec<&[u8]> = if result.is_empty() {
        vec![result]
    } else {
        result.chunks(room).collect()
    };
    let count = pieces.len() as u32;
    pieces
        .into_iter()
        .map(|p| {
            let mut b = Vec::with_capacity(p.len() + OUTPUT_HEADER_LEN);
            b.push(TAG_DATA);
            b.extend_from_slice(&count.to_be_bytes());
            b.extend_from_slice(p);
            b
        })
        .collect()
}

pub fn overflow_marker() -> Vec<u8> {
    vec![TAG_OVERFLOW]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputBox {
    Data { count: u32, data: Vec<u8> },
    Overflow,
}

pub fn parse_output_box(bytes: &[u8]) -> Result<OutputBox, ProtocolError> {
    match bytes.first() {
        Some(&TAG_OVERFLOW) if bytes.len() == 1 => Ok(OutputBox::Overflow),
        Some(&TAG_DATA) if bytes.len() >= OUTPUT_HEADER_LEN => {
            let count = u32::from_be_bytes(bytes[1..5].try_into().unwrap());
            if count == 0 {
                return Err(ProtocolError::BadFraming("zero chunk count"));
            }
            Ok(OutputBox::Data {
                count,
                data: bytes[OUTPUT_HEADER_LEN..].to_vec(),
            })
        }
        _ => Err(ProtocolError::BadFraming("unknown tag or truncated header")),
    }
}

/// Deterministic stand-in for the model forward pass.
#[derive(Clone)]
pub struct StubFn {
    name: String,
    f: Arc<dyn Fn(&[u8]) -> Vec<u8> + Send + Sync>,
}

impl StubFn {
    pub fn new(name: &str, f: impl Fn(&[u8]) -> Vec<u8> + Send + Sync + 'static) -> Self {
        Self {
            name: name.to_string(),
            f: Arc::new(f),
        }
    }

    pub fn identity() -> Self {
        Self::new("identity", |x| x.to_vec())
    }

    pub fn reverse() -> Self {
        Self::new("reverse", |x| x.iter().rev().copied().collect())
    }

    pub fn empty() -> Self {
        Self::new("empty", |_| Vec::new())
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::identity()),
            "reverse" => Some(Self::reverse()),
            "empty" => Some(Self::empty()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn call(&self, input: &[u8]) -> Vec<u8> {
        (self.f)(input)
    }
}

impl fmt::Debug for StubFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("StubFn").field(&self.name).finish()
    }
}

/// Simulated compute: `t_LLM = ttft + n_out · itl` seconds, output from the
/// stub.
#[derive(Debug, Clone)]
pub struct ComputeModel {
    pub ttft: f64,
    pub itl: f64,
    pub n_out: u32,
    pub stub: StubFn,
}

impl ComputeModel {
    pub fn new(ttft: f64, itl: f64, n_out: u32, stub: StubFn) -> Self {
        Self { ttft, itl, n_out, stub }
    }

    /// Zero-duration identity compute.
    pub fn instant() -> Self {
        Self::new(0.0, 0.0, 0, StubFn::identity())
    }

    /// Fixed duration identity compute.
    pub fn fixed(seconds: f64) -> Self {
        Self::new(seconds, 0.0, 0, StubFn::identity())
    }

    pub fn t_llm(&self) -> f64 {
        self.ttft + f64::from(self.n_out) * self.itl
    }
}

/// Tracks write-capability roots already bound to a job.
#[derive(Debug, Clone, Default)]
pub struct CapabilityRegistry {
    used: HashSet<[u8; 32]>,
}

impl CapabilityRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, cap: &WriteCapability) -> Result<(), ProtocolError> {
        let root = cap.root_public_bytes();
        if self.used.insert(root) {
            Ok(())
        } else {
            Err(ProtocolError::FreshnessViolation(hex::encode(root)))
        }
    }

    pub fn contains(&self, cap: &WriteCapability) -> bool {
        self.used.contains(&cap.root_public_bytes())
    }

    pub fn len(&self) -> usize {
        self.used.len()
    }

    pub fn is_empty(&self) -> bool {
        self.used.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "reason")]
pub enum JobStatus {
    Ok,
    Overflow,
    Failed(String),
}

impl JobStatus {
    pub fn as_str(&self) -> &str {
        match self {
            JobStatus::Ok => "ok",
            JobStatus::Overflow => "overflow",
            JobStatus::Failed(_) => "failed",
        }
    }
}

/// Per-echo round trips and compute time of one job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    /// Round trip of each stage, `Stage` order. Multi-box stages count the
    /// slowest box.
    pub echoes: [f64; 5],
    pub mix_time: f64,
    /// Time from compute start to release.
    pub compute_bucket_time: f64,
    /// `mix_time + compute_bucket_time`.
    pub total: f64,
    /// Job start to fetched result, including queueing and failed polls.
    pub wall_clock: f64,
    pub failed_polls: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    pub job_id: u64,
    pub status: JobStatus,
    /// Release offset from the bucket epoch.
    pub release_time: f64,
    pub result_boxes: Vec<[u8; 32]>,
    /// Compute duration; private to the service.
    pub t_finish: f64,
    pub output: Option<Vec<u8>>,
    pub latency: LatencyBreakdown,
}

/// JSON outcome line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub job_id: u64,
    pub status: String,
    pub release_time: f64,
    pub total_latency: f64,
    pub mix_time: f64,
    pub compute_bucket_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub wall_clock: f64,
}

impl From<&JobOutcome> for OutcomeRecord {
    fn from(o: &JobOutcome) -> Self {
        Self {
            job_id: o.job_id,
            status: o.status.as_str().to_string(),
            release_time: o.release_time,
            total_latency: o.latency.total,
            mix_time: o.latency.mix_time,
            compute_bucket_time: o.latency.compute_bucket_time,
            failure: match &o.status {
                JobStatus::Failed(why) => Some(why.clone()),
                _ => None,
            },
            wall_clock: o.latency.wall_clock,
        }
    }
}
