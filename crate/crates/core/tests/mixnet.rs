use funion::mixnet::*;
use funion::perfmodel::erlang_cdf;
use funion::stats::{ks_p_value, ks_statistic, mean_var};
use rand_distr::{Distribution, Poisson};

fn net(mu: f64, seed: u64) -> Mixnet {
    let topo = Topology::layered(2, 4, 2, 1, 3).unwrap();
    Mixnet::new(topo, DelayModel::new(mu).unwrap(), RngStreams::new(seed), PAYLOAD_CAPACITY).unwrap()
}

#[test]
fn route_choice_is_uniform_per_layer() {
    let t = Topology::layered(1, 4, 1, 0, 1).unwrap();
    let n = 10_000u32;
    let mut counts = vec![[0u32; 4]; 3];
    for i in 0..n {
        let mut rng = RngStreams::new(11).rng(Stream::Route, u64::from(i));
        let r = build_route(&t, t.gateways[0], t.storage_couriers[0], &mut rng).unwrap();
        assert_eq!(r.len(), 5);
        for layer in 0..3 {
            let pos = t.mix_layers[layer].iter().position(|&m| m == r[layer + 1]).unwrap();
            counts[layer][pos] += 1;
        }
    }
    // Binomial(n, 1/4): mean 2500, sd sqrt(n p q).
    let sd = (f64::from(n) * 0.25 * 0.75).sqrt();
    for layer in &counts {
        for &c in layer {
            assert!((f64::from(c) - 2500.0).abs() <= 3.0 * sd, "{counts:?}");
        }
    }
}

#[test]
fn echo_round_trip_matches_erlang() {
    let mut m = net(0.2, 5);
    m.set_record_trace(false);
    let topo = m.topology().clone();
    let n = 20_000;
    let rtts: Vec<f64> = (0..n)
        .map(|i| {
            m.echo(0.0, topo.clients[i % 3], topo.storage_couriers[i % 2], PacketKind::Application, 100)
                .unwrap()
                .round_trip()
        })
        .collect();
    let (mean, var) = mean_var(&rtts);
    // 3-sigma CLT bounds: sd(mean) = sqrt(0.36 / n); Var of the sample
    // variance for an Erlang(9, 5) is (mu4 - sigma^4 (n-3)/(n-1)) / n with
    // mu4 = 3 sigma^4 + 6 sigma^4 / 9.
    let sd_mean = (0.36 / n as f64).sqrt();
    let sigma4 = 0.36f64 * 0.36;
    let mu4 = 3.0 * sigma4 + 6.0 * sigma4 / 9.0;
    let sd_var = ((mu4 - sigma4) / n as f64).sqrt();
    assert!((mean - 1.8).abs() < 3.0 * sd_mean, "mean {mean}");
    assert!((var - 0.36).abs() < 3.0 * sd_var, "var {var}");
    let d = ks_statistic(&rtts, |x| erlang_cdf(9, 5.0, x));
    assert!(d < 0.015, "ks {d}");
}

#[test]
fn hop_delays_are_exponential_and_memoryless() {
    let mut m = net(0.2, 6);
    m.set_record_trace(false);
    let topo = m.topology().clone();
    let mut delays = Vec::new();
    for _ in 0..2000 {
        let e = m.echo(0.0, topo.clients[0], topo.storage_couriers[0], PacketKind::Application, 0).unwrap();
        delays.extend(e.hop_delays);
    }
    let exp_cdf = |x: f64| 1.0 - (-x / 0.2).exp();
    let d = ks_statistic(&delays, exp_cdf);
    assert!(ks_p_value(d, delays.len() as f64) > 0.001, "ks {d}");
    // Residual delay beyond 0.1 s has the same law as a fresh delay.
    let tail: Vec<f64> = delays.iter().filter(|&&x| x > 0.1).map(|x| x - 0.1).collect();
    let d = ks_statistic(&tail, exp_cdf);
    assert!(ks_p_value(d, tail.len() as f64) > 0.001, "residual ks {d}");
}

#[test]
fn zero_mu_limit() {
    let mut m = net(1e-9, 7);
    let topo = m.topology().clone();
    let e = m.echo(3.0, topo.clients[0], topo.storage_couriers[0], PacketKind::Application, 0).unwrap();
    assert!(e.round_trip() < 1e-6);
}

#[test]
fn every_echo_crosses_ten_links_with_nine_delays() {
    let mut m = net(0.2, 8);
    let topo = m.topology().clone();
    let e = m.echo(0.0, topo.clients[1], topo.compute_couriers[0], PacketKind::Application, 10).unwrap();
    let ev = m.hop_events();
    assert_eq!(ev.len(), LINKS_PER_ECHO);
    assert_eq!(e.hop_delays.len(), HOPS_PER_ECHO);
    assert_eq!(ev[0].src, topo.clients[1]);
    assert_eq!(ev[LINKS_PER_ECHO - 1].dst, topo.clients[1]);
    assert!((ev[LINKS_PER_ECHO - 1].t - e.returned).abs() < 1e-12);
    let sum: f64 = e.hop_delays.iter().sum();
    assert!((sum - e.round_trip()).abs() < 1e-12);
    assert!(e.launched <= e.delivered && e.delivered <= e.returned);
}

#[test]
fn cover_traffic_is_poisson() {
    let cover = CoverSource { lambda_s: 2.5 };
    let streams = RngStreams::new(9);
    let counts: Vec<f64> = (0..1000)
        .map(|i| run_cover_traffic(&cover, 400.0, &mut streams.rng(Stream::Cover, i)).len() as f64)
        .collect();
    let (mean, var) = mean_var(&counts);
    // Poisson(1000): sd of the mean is 1.
    assert!((mean - 1000.0).abs() < 3.0, "mean {mean}");
    // Dispersion index within a loose band around 1.
    assert!((var / mean - 1.0).abs() < 0.15, "var/mean {}", var / mean);
    assert!(run_cover_traffic(&cover, 0.0, &mut streams.rng(Stream::Cover, 0)).is_empty());
    let day = run_cover_traffic(&cover, 86_400.0, &mut streams.rng(Stream::Cover, 5000)).len() as f64;
    // Poisson(216 000): sd ≈ 465.
    assert!((day - 216_000.0).abs() < 5.0 * 465.0, "{day}");
    let bytes = day * (PAYLOAD_CAPACITY + PACKET_OVERHEAD) as f64;
    assert!((bytes / 1e9 - 6.7).abs() < 0.05);
    // Oracle sanity: a reference Poisson sampler agrees on the scale.
    let p = Poisson::new(1000.0).unwrap();
    let mut r = streams.rng(Stream::Trial, 0);
    let ref_mean: f64 = (0..1000).map(|_| p.sample(&mut r)).sum::<f64>() / 1000.0;
    assert!((ref_mean - mean).abs() < 6.0);
}

#[test]
fn observer_sees_constant_size_and_no_kinds() {
    let mut m = net(0.2, 10);
    let topo = m.topology().clone();
    m.echo(0.0, topo.clients[0], topo.storage_couriers[0], PacketKind::Application, 5000).unwrap();
    for i in 0..5 {
        m.echo(0.1 * f64::from(i), topo.clients[0], topo.storage_couriers[1], PacketKind::LoopCover, 0).unwrap();
    }
    let view = m.observer_view();
    assert_eq!(view.events.len(), 6 * LINKS_PER_ECHO);
    assert!(view.events.iter().all(|e| e.size == 31_000));
    assert!(view.events.windows(2).all(|w| w[0].t <= w[1].t));
    let line = view.to_jsonl().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["dst", "size", "src", "t"]);
    assert!(m.make_packet(topo.clients[0], topo.storage_couriers[0], PacketKind::Application, PAYLOAD_CAPACITY + 1).is_err());
}

#[test]
fn swapping_which_slot_is_application_leaves_the_trace_unchanged() {
    let run = |app_slot: usize| {
        let mut m = net(0.2, 12);
        let topo = m.topology().clone();
        for slot in 0..6 {
            let kind = if slot == app_slot { PacketKind::Application } else { PacketKind::LoopCover };
            m.echo(0.4 * slot as f64, topo.clients[0], topo.storage_couriers[0], kind, 0).unwrap();
        }
        m.observer_view()
    };
    let a = run(3);
    let b = run(5);
    assert_eq!(a, b);
    assert_eq!(a.events.len(), 60);
}

#[test]
fn empty_run_has_empty_trace() {
    let m = net(0.2, 13);
    assert!(m.observer_view().events.is_empty());
    assert!(observer_view(&[]).events.is_empty());
    assert_eq!(m.stats().events, 0);
}

#[test]
fn same_seed_same_trace() {
    let go = || {
        let mut m = net(0.2, 14);
        let topo = m.topology().clone();
        for i in 0..50 {
            m.echo(f64::from(i) * 0.05, topo.clients[i as usize % 3], topo.storage_couriers[0], PacketKind::Application, 0).unwrap();
        }
        m.observer_view().to_jsonl()
    };
    assert_eq!(go(), go());
}
