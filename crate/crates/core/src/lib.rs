//! Anonymous LLM inference over a mix network.
//!
//! The crate models the whole path from a client prompt to a released
//! result: blinded capability storage ([`bacap`]), replicated storage with
//! couriers ([`pigeonhole`]), a continuous-time mixnet simulator
//! ([`mixnet`]), the five-echo inference workflow with latency buckets
//! ([`protocol`]), closed-form overhead arithmetic ([`perfmodel`]) and the
//! experiment drivers behind the `funion` binary ([`harness`]).

pub mod bacap;
pub mod harness;
pub mod mixnet;
pub mod perfmodel;
pub mod pigeonhole;
pub mod protocol;
pub mod stats;
