//! Play the input/output unlinkability game with and without latency
//! buckets.

use funion::harness::{default_iou_config, run_iou_experiment, RunConfig};

fn main() {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    for bucketing in [true, false] {
        let cfg = RunConfig { bucketing, ..default_iou_config() };
        let r = run_iou_experiment(&cfg, trials).unwrap();
        println!(
            "bucketing {:<5}: accuracy {:.3}, 95% CI [{:.3}, {:.3}], identical views {:.0}%",
            bucketing,
            r.adversary_accuracy,
            r.confidence_interval.0,
            r.confidence_interval.1,
            100.0 * r.identical_view_fraction
        );
    }
}
