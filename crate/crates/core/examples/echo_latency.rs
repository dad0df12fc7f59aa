//! Sample mixnet round trips and compare them with the Erlang(9, 1/mu)
//! model.

use funion::mixnet::{DelayModel, Mixnet, PacketKind, RngStreams, Topology, PAYLOAD_CAPACITY};
use funion::perfmodel::{echo_stats, erlang_cdf};
use funion::stats::{ks_statistic, mean_var, percentile};

fn main() {
    let mu = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let topo = Topology::layered(2, 4, 2, 2, 4).unwrap();
    let mut net = Mixnet::new(topo.clone(), DelayModel::new(mu).unwrap(), RngStreams::new(1), PAYLOAD_CAPACITY).unwrap();
    net.set_record_trace(false);
    let rtts: Vec<f64> = (0..50_000)
        .map(|_| {
            net.echo(0.0, topo.clients[0], topo.storage_couriers[0], PacketKind::Application, 0)
                .unwrap()
                .round_trip()
        })
        .collect();
    let (mean, var) = mean_var(&rtts);
    let (m, v) = echo_stats(9, mu);
    let ks = ks_statistic(&rtts, |x| erlang_cdf(9, 1.0 / mu, x));
    println!("mu = {mu} s per hop, 9 hops per echo");
    println!("sample mean {mean:.4} s (model {m:.4}), variance {var:.4} s² (model {v:.4})");
    println!("p50 {:.3} s, p99 {:.3} s, KS distance {ks:.4}", percentile(&rtts, 0.5), percentile(&rtts, 0.99));
}
