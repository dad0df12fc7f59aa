//! Closed-form latency, overhead and bandwidth arithmetic.
//!
//! Bandwidth figures use decimal units (1 kB = 1000 B). Activation sizing
//! uses binary units because a 4096 × 4096 fp16 activation is exactly 32 MiB.

use crate::protocol::bucket::round_up_to_bucket;
use crate::mixnet::HOPS_PER_ECHO;
use serde::{Deserialize, Serialize};

/// One inference workload row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub n_in: u32,
    pub n_out: u32,
    /// Time to first token, seconds.
    pub ttft: f64,
    /// Inter-token latency, seconds per token.
    pub itl: f64,
}

impl Scenario {
    pub fn new(name: &str, n_in: u32, n_out: u32, ttft_ms: f64, itl_ms: f64) -> Self {
        Self {
            name: name.to_string(),
            n_in,
            n_out,
            ttft: ttft_ms / 1000.0,
            itl: itl_ms / 1000.0,
        }
    }
}

/// Llama-3.3-70B on 4×H100 (fp16, TP=4) reference latencies.
pub fn reference_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::new("Balanced", 200, 200, 32.78, 19.11),
        Scenario::new("Medium", 1000, 1000, 103.20, 19.31),
        Scenario::new("Output-heavy", 500, 2000, 71.82, 19.26),
        Scenario::new("Input-heavy", 5000, 500, 368.11, 19.94),
    ]
}

/// Mean and variance of the sum of `hops` independent exponential delays
/// with mean `mu`.
pub fn echo_stats(hops: u32, mu: f64) -> (f64, f64) {
    let h = f64::from(hops);
    (h * mu, h * mu * mu)
}

/// `TTFT + n_out · ITL`.
pub fn llm_latency(s: &Scenario) -> f64 {
    s.ttft + f64::from(s.n_out) * s.itl
}

/// CDF of Erlang(`k`, `rate`) at `x`.
pub fn erlang_cdf(k: u32, rate: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let lx = rate * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..k {
        term *= lx / f64::from(n);
        sum += term;
    }
    (1.0 - (-lx).exp() * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub scenario: String,
    pub t_llm: f64,
    pub t_llm_rounded: f64,
    pub t_mix: f64,
    pub total: f64,
    /// Mix share of the total, in whole percent.
    pub mix_pct: u32,
}

/// Mix share `t_mix / (t_mix + t_llm_rounded)` as a whole percentage,
/// rounded to nearest.
pub fn mix_percentage(t_mix: f64, t_llm_rounded: f64) -> u32 {
    let total = t_mix + t_llm_rounded;
    if total <= 0.0 {
        return 0;
    }
    // The 1e-9 guard keeps exact halves from falling below .5 through
    // binary rounding of the inputs.
    (100.0 * t_mix / total + 1e-9).round() as u32
}

/// End-to-end latency split with `echoes` round trips of nine hops each.
pub fn overhead_table(scenarios: &[Scenario], mu: f64, delta: f64, echoes: u32) -> Vec<OverheadRow> {
    let (t_mix, _) = echo_stats(echoes * HOPS_PER_ECHO as u32, mu);
    scenarios
        .iter()
        .map(|s| {
            let t_llm = llm_latency(s);
            let t_llm_rounded = round_up_to_bucket(t_llm, delta);
            OverheadRow {
                scenario: s.name.clone(),
                t_llm,
                t_llm_rounded,
                t_mix,
                total: t_llm_rounded + t_mix,
                mix_pct: mix_percentage(t_mix, t_llm_rounded),
            }
        })
        .collect()
}

/// Bytes a client spends on cover traffic: `lambda_s · packet_bytes · seconds`.
pub fn bandwidth_budget(lambda_s: f64, packet_bytes: f64, seconds: f64) -> f64 {
    lambda_s * packet_bytes * seconds
}

/// Inferences that fit the cover budget when application packets replace
/// loop packets.
pub fn max_inference_rate(lambda_s: f64, packets_per_inference: u32, seconds: f64) -> u64 {
    assert!(packets_per_inference >= 1, "an inference needs at least one packet");
    // Nudge up by a relative epsilon so exact products survive floor().
    let q = lambda_s * seconds / f64::from(packets_per_inference);
    (q * (1.0 + 1e-12)).floor() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenStateSize {
    pub per_layer_bytes: u64,
    pub total_bytes: u64,
    pub per_layer_transfer_s: f64,
    pub full_pass_transfer_s: f64,
}

/// Activation volume for shipping hidden states between layers.
pub fn hidden_state_size(
    batch: u64,
    seq_len: u64,
    hidden_dim: u64,
    bytes_per_elem: u64,
    layers: u64,
    link_bps: f64,
) -> HiddenStateSize {
    let per_layer_bytes = batch * seq_len * hidden_dim * bytes_per_elem;
    let total_bytes = per_layer_bytes * layers;
    HiddenStateSize {
        per_layer_bytes,
        total_bytes,
        per_layer_transfer_s: per_layer_bytes as f64 * 8.0 / link_bps,
        full_pass_transfer_s: total_bytes as f64 * 8.0 / link_bps,
    }
}

/// Table of `t_LLM` per scenario as CSV.
pub fn latency_csv(scenarios: &[Scenario]) -> String {
    let mut out = String::from("scenario,n_in,n_out,ttft_ms,itl_ms,t_llm_s\n");
    for s in scenarios {
        out.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2}\n",
            s.name,
            s.n_in,
            s.n_out,
            s.ttft * 1000.0,
            s.itl * 1000.0,
            llm_latency(s)
        ));
    }
    out
}

pub fn overhead_csv(rows: &[OverheadRow]) -> String {
    let mut out = String::from("scenario,t_llm_rounded_s,t_mix_s,total_s,mix_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.2},{:.1},{:.2},{}\n",
            r.scenario, r.t_llm_rounded, r.t_mix, r.total, r.mix_pct
        ));
    }
    out
}

pub fn latency_text(scenarios: &[Scenario]) -> String {
    let mut out = format!(
        "{:<14} {:>6} {:>6} {:>10} {:>9} {:>9}\n",
        "Scenario", "n_in", "n_out", "TTFT (ms)", "ITL (ms)", "t_LLM (s)"
    );
    for s in scenarios {
        out.push_str(&format!(
            "{:<14} {:>6} {:>6} {:>10.2} {:>9.2} {:>9.2}\n",
            s.name,
            s.n_in,
            s.n_out,
            s.ttft * 1000.0,
            s.itl * 1000.0,
            llm_latency(s)
        ));
    }
    out
}

pub fn overhead_text(rows: &[OverheadRow]) -> String {
    let mut out = format!(
        "{:<14} {:>12} {:>9} {:>10} {:>6}\n",
        "Scenario", "t_LLM^r (s)", "t_mix (s)", "Total (s)", "Mix %"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>12.2} {:>9.1} {:>10.2} {:>5}%\n",
            r.scenario, r.t_llm_rounded, r.t_mix, r.total, r.mix_pct
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn echo_stats_values() {
        let (m, v) = echo_stats(9, 0.2);
        assert_abs_diff_eq!(m, 1.8, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.36, epsilon = 1e-12);
        assert_eq!(echo_stats(1, 1.0), (1.0, 1.0));
        let (m, v) = echo_stats(45, 0.2);
        assert_abs_diff_eq!(m, 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 1.8, epsilon = 1e-12);
    }

    #[test]
    fn llm_latency_zero_output_is_ttft() {
        let s = Scenario::new("x", 10, 0, 50.0, 20.0);
        assert_abs_diff_eq!(llm_latency(&s), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn erlang_cdf_matches_gamma() {
        use statrs::distribution::{ContinuousCDF, Gamma};
        let g = Gamma::new(9.0, 5.0).unwrap();
        for x in [0.1, 0.5, 1.0, 1.8, 3.0, 6.0] {
            assert_abs_diff_eq!(erlang_cdf(9, 5.0, x), g.cdf(x), epsilon = 1e-10);
        }
        assert_eq!(erlang_cdf(9, 5.0, 0.0), 0.0);
        assert_abs_diff_eq!(erlang_cdf(1, 2.0, 1.0), 1.0 - (-2.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn bandwidth_edges() {
        assert_eq!(bandwidth_budget(0.0, 31_000.0, 86_400.0), 0.0);
        assert_abs_diff_eq!(bandwidth_budget(2.5, 31_000.0, 3_600.0), 279_000_000.0, epsilon = 1e-3);
        assert_eq!(max_inference_rate(2.5, 5, 86_400.0), 43_200);
        assert_eq!(max_inference_rate(2.5, 3, 60.0), 50);
    }

    #[test]
    fn hidden_state_zero_batch() {
        let h = hidden_state_size(0, 4096, 4096, 2, 32, 1e10);
        assert_eq!(h.per_layer_bytes, 0);
        assert_eq!(h.total_bytes, 0);
        assert_eq!(h.full_pass_transfer_s, 0.0);
    }

    #[test]
    fn mix_percentage_rounds_to_nearest() {
        assert_eq!(mix_percentage(9.0, 4.0), 69);
        assert_eq!(mix_percentage(9.0, 38.6), 19);
        assert_eq!(mix_percentage(1.0, 1.0), 50);
        assert_eq!(mix_percentage(0.0, 0.0), 0);
    }
}
