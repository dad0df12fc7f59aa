//! Print the latency and overhead tables plus the cover-traffic budget.

use funion::perfmodel::{
    bandwidth_budget, hidden_state_size, latency_text, max_inference_rate, overhead_table, overhead_text,
    reference_scenarios,
};

fn main() {
    let scenarios = reference_scenarios();
    print!("{}", latency_text(&scenarios));
    println!();
    print!("{}", overhead_text(&overhead_table(&scenarios, 0.2, 0.2, 5)));
    println!();
    let gb = bandwidth_budget(2.5, 31_000.0, 86_400.0) / 1e9;
    println!("cover traffic at 2.5 pkt/s: {gb:.2} GB per day");
    println!("inferences per day at 3 packets each: {}", max_inference_rate(2.5, 3, 86_400.0));
    let h = hidden_state_size(1, 4096, 4096, 2, 32, 1e10);
    println!(
        "hidden states: {} MiB per layer, {} GiB per pass, {:.0} ms / {:.0} ms at 10 Gb/s",
        h.per_layer_bytes >> 20,
        h.total_bytes >> 30,
        h.per_layer_transfer_s * 1e3,
        h.full_pass_transfer_s * 1e3
    );
}
