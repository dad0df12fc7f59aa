//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use funion::bacap::*;
use funion::harness::*;
use funion::mixnet::*;
use funion::perfmodel::*;
use funion::protocol::*;
use funion::stats::{chi_square_quantile, chi_square_uniform, ks_statistic, mean_var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// 1. Single-echo round trips against Erlang(9, 5).
fn echo_latency() -> Outcome {
    let topo = Topology::layered(2, 4, 2, 2, 4).map_err(|e| e.to_string())?;
    let mut m = Mixnet::new(topo.clone(), DelayModel::new(0.2).unwrap(), RngStreams::new(1001), PAYLOAD_CAPACITY)
        .map_err(|e| e.to_string())?;
    m.set_record_trace(false);
    let n = 100_000;
    let rtts: Vec<f64> = (0..n)
        .map(|i| {
            let c = topo.clients[i % topo.clients.len()];
            let s = topo.storage_couriers[i % topo.storage_couriers.len()];
            m.echo(0.0, c, s, PacketKind::Application, 0).expect("echo").round_trip()
        })
        .collect();
    let (mean, var) = mean_var(&rtts);
    let ks = ks_statistic(&rtts, |x| erlang_cdf(9, 5.0, x));
    let detail = format!("n={n} mean={mean:.5} var={var:.5} ks={ks:.5}");
    ensure((mean - 1.8).abs() <= 0.006, format!("mean out of 1.8±0.006: {detail}"))?;
    ensure((var - 0.36).abs() <= 0.01, format!("var out of 0.36±0.01: {detail}"))?;
    ensure(ks < 0.01, format!("ks >= 0.01: {detail}"))?;
    Ok(detail)
}

/// 2. Five-echo mix time over zero-compute jobs.
fn pipeline_latency() -> Outcome {
    let run = RunConfig {
        seed: 1002,
        trace: false,
        gossip: false,
        jobs: vec![JobConfig { count: 100_000, ..JobConfig::default() }],
        ..RunConfig::default()
    };
    let out = run_e2e(&run, None).map_err(|e| e.to_string())?;
    let s = &out.summary;
    let detail = format!(
        "jobs={} ok={} failed={} mean={:.4} var={:.4}",
        s.jobs, s.ok, s.failed, s.mix_time_mean, s.mix_time_var
    );
    ensure(s.ok == 100_000, format!("not every job succeeded: {detail}"))?;
    ensure((s.mix_time_mean - 9.0).abs() <= 0.02, format!("mean out of 9.0±0.02: {detail}"))?;
    ensure((s.mix_time_var - 1.8).abs() <= 0.05, format!("var out of 1.8±0.05: {detail}"))?;
    Ok(detail)
}

/// 3. LLM latency per reference scenario.
fn table3() -> Outcome {
    let want = [3.85, 19.41, 38.59, 10.34];
    let got: Vec<f64> = reference_scenarios().iter().map(llm_latency).collect();
    let detail = format!("{got:.4?}");
    for (g, w) in got.iter().zip(want) {
        ensure((g - w).abs() <= 0.01, format!("{g} vs {w}"))?;
    }
    Ok(detail)
}

/// 4. Overhead table, exact.
fn table4() -> Outcome {
    let rows = overhead_table(&reference_scenarios(), 0.2, 0.2, 5);
    let want = [(4.00, 13.00, 69), (19.60, 28.60, 31), (38.60, 47.60, 19), (10.40, 19.40, 46)];
    for (r, (rounded, total, pct)) in rows.iter().zip(want) {
        ensure(
            (r.t_llm_rounded - rounded).abs() < 1e-9 && (r.total - total).abs() < 1e-9 && r.mix_pct == pct,
            format!("{r:?}"),
        )?;
    }
    Ok(rows
        .iter()
        .map(|r| format!("{} {:.2}/{:.2}/{}%", r.scenario, r.t_llm_rounded, r.total, r.mix_pct))
        .collect::<Vec<_>>()
        .join(", "))
}

/// 5. Daily cover budget and inference rate.
fn bandwidth() -> Outcome {
    let gb = bandwidth_budget(2.5, 31_000.0, 86_400.0) / 1e9;
    let rate = max_inference_rate(2.5, 3, 86_400.0);
    let detail = format!("budget={gb:.4} GB rate={rate}");
    ensure((6.69..=6.70).contains(&gb), detail.clone())?;
    ensure(rate == 72_000, detail.clone())?;
    Ok(detail)
}

/// 6. BACAP properties.
fn bacap_suite() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1006);

    // Round trips with random capabilities, indices, contexts and payloads.
    for i in 0..10_000 {
        let (w, r) = generate_capability(&mut rng);
        let index = rng.gen_range(1..=32);
        let ctx = if i % 2 == 0 { CTX_IN } else { CTX_OUT };
        let mut body = vec![0u8; rng.gen_range(0..=1024)];
        rng.fill_bytes(&mut body);
        let rec = seal(&w, index, ctx, &body).map_err(|e| e.to_string())?;
        ensure(verify_record(&rec), format!("round trip {i}: signature rejected"))?;
        ensure(open(&r, index, ctx, &rec).as_deref() == Ok(&body[..]), format!("round trip {i} failed"))?;
    }

    // Single-bit mutations of a short record.
    let (w, r) = generate_capability(&mut rng);
    let rec = seal(&w, 3, CTX_IN, b"short").map_err(|e| e.to_string())?;
    let bytes = rec.to_bytes();
    let mut flips = 0;
    for bit in 0..bytes.len() * 8 {
        let mut b = bytes.clone();
        b[bit / 8] ^= 1 << (bit % 8);
        let accepted = BoxRecord::from_bytes(&b)
            .map(|m| verify_record(&m) && open(&r, 3, CTX_IN, &m).is_ok())
            .unwrap_or(false);
        ensure(!accepted, format!("bit {bit} flip accepted"))?;
        flips += 1;
    }

    // Read and write capabilities agree on location and keys.
    for _ in 0..1000 {
        let (w, r) = generate_capability(&mut rng);
        let index = rng.gen_range(1..=64);
        let mut ctx = vec![0u8; rng.gen_range(1..=32)];
        rng.fill_bytes(&mut ctx);
        let kw = derive_box(&w, index, &ctx).map_err(|e| e.to_string())?;
        let kr = derive_box(&r, index, &ctx).map_err(|e| e.to_string())?;
        ensure(
            kw.box_id == kr.box_id && kw.enc_key == kr.enc_key && kw.nonce == kr.nonce,
            format!("read/write disagree at index {index}"),
        )?;
    }

    // Context disjointness and byte uniformity over a 10 000-box chain.
    let (w, _) = generate_capability(&mut rng);
    let mut ins = HashSet::new();
    let mut outs = HashSet::new();
    let mut counts = [0u64; 256];
    for out in Chain::new(*w.seed()).take(10_000) {
        let a = derive_box_from_output(&w, &out, CTX_IN).map_err(|e| e.to_string())?.box_id;
        let b = derive_box_from_output(&w, &out, CTX_OUT).map_err(|e| e.to_string())?.box_id;
        for byte in a.iter().chain(&b) {
            counts[*byte as usize] += 1;
        }
        ins.insert(a);
        outs.insert(b);
    }
    ensure(ins.len() == 10_000 && outs.len() == 10_000, "Box-ID collision within a context")?;
    ensure(ins.is_disjoint(&outs), "contexts share a Box-ID")?;
    let chi = chi_square_uniform(&counts);
    let crit = chi_square_quantile(255.0, 0.999);
    ensure(chi < crit, format!("chi-square {chi:.1} >= {crit:.1}"))?;
    Ok(format!(
        "10000 round trips, {flips} bit flips rejected, 1000 agreements, 2x10000 disjoint ids, chi2={chi:.1}<{crit:.1}"
    ))
}

/// 7. Release policy sweep and leakage determinism.
fn bucket_policy() -> Outcome {
    let grid = BucketGrid::default();
    let mut checked = 0u64;
    for j in 1..=grid.n {
        let t_j = grid.edge(j).map_err(|e| e.to_string())?;
        let last = ((t_j + 0.2) * 1000.0).round() as u64;
        for step in 0..=last {
            let t_finish = step as f64 * 1e-3;
            let (status, release) = wait_for_bucket_edge(&grid, t_j, t_finish).map_err(|e| e.to_string())?;
            let want = if t_finish >= t_j { BucketStatus::Overflow } else { BucketStatus::Ok };
            ensure(release == t_j && status == want, format!("j={j} t_finish={t_finish}"))?;
            checked += 1;
        }
        ensure(
            wait_for_bucket_edge(&grid, t_j, t_j).map_err(|e| e.to_string())?.0 == BucketStatus::Overflow,
            format!("no flip at t_j for j={j}"),
        )?;
    }

    // Release offsets: 1000 jobs per (j, o) with random compute times.
    let mut rng = ChaCha20Rng::seed_from_u64(1007);
    let cfg = SimConfig { seed: 1007, record_trace: false, gossip: false, ..SimConfig::default() };
    let mut sim = Simulation::new(cfg.clone()).map_err(|e| e.to_string())?;
    let j = 25; // 5 s
    for i in 0..2000 {
        let t = if i % 2 == 0 { rng.gen_range(0.0..4.999) } else { rng.gen_range(5.0..9.0) };
        let start = rng.gen_range(0.0..100.0);
        sim.submit(JobSpec::new(i % 4, vec![i as u8; 4], j, ComputeModel::fixed(t)).starting_at(start))
            .map_err(|e| e.to_string())?;
    }
    let out = sim.run().map_err(|e| e.to_string())?;
    let mut by_flag: [BTreeSet<u64>; 2] = Default::default();
    for (i, o) in out.iter().enumerate() {
        let flag = match o.status {
            JobStatus::Ok => 0,
            JobStatus::Overflow => 1,
            JobStatus::Failed(ref why) => return Err(format!("job {i} failed: {why}")),
        };
        ensure(flag == i % 2, format!("job {i} has the wrong overflow flag"))?;
        by_flag[flag].insert(o.release_time.to_bits());
    }
    ensure(by_flag.iter().all(|s| s.len() == 1), format!("release offsets vary: {by_flag:?}"))?;

    // Distinct observables over every index.
    let mut sim = Simulation::new(SimConfig { seed: 1008, ..cfg }).map_err(|e| e.to_string())?;
    let mut idx = Vec::new();
    for i in 0..3000 {
        let jj = rng.gen_range(1..=grid.n);
        idx.push(jj);
        let t = rng.gen_range(0.0..grid.last_edge() * 1.1);
        sim.submit(JobSpec::new(i % 4, vec![], jj, ComputeModel::fixed(t))).map_err(|e| e.to_string())?;
    }
    let out = sim.run().map_err(|e| e.to_string())?;
    let mut seen = BTreeSet::new();
    for (o, &jj) in out.iter().zip(&idx) {
        let t_j = grid.edge(jj).unwrap();
        ensure((o.status == JobStatus::Overflow) == (o.t_finish >= t_j), "overflow flag does not match t_finish >= t_j")?;
        seen.insert(match o.status {
            JobStatus::Overflow => None,
            _ => Some(o.release_time.to_bits()),
        });
    }
    ensure(seen.len() <= grid.n as usize + 1, format!("{} outcomes", seen.len()))?;
    Ok(format!(
        "{checked} sweep points, 2x1000 jobs with one release offset each, {} outcomes <= {}",
        seen.len(),
        grid.n + 1
    ))
}

/// Jobs and traces shared by criteria 8 and 10.
struct E2eCase {
    inputs: Vec<Vec<u8>>,
    tokens: Vec<usize>,
    sim: Simulation,
    outcomes: Vec<JobOutcome>,
}

fn e2e_case() -> Result<E2eCase, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(1008);
    let mut tokens: Vec<usize> = (0..100).map(|_| rng.gen_range(0..=7500)).collect();
    tokens.extend([7501, 15_000, 15_001, 22_600]);
    let mut sim = Simulation::new(SimConfig { seed: 1008, ..SimConfig::default() }).map_err(|e| e.to_string())?;
    let mut inputs = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        let mut input = vec![0u8; t * TOKEN_BYTES];
        rng.fill_bytes(&mut input);
        sim.submit(JobSpec::new(i % 4, input.clone(), 50, ComputeModel::fixed(rng.gen_range(0.0..5.0))))
            .map_err(|e| e.to_string())?;
        inputs.push(input);
    }
    let outcomes = sim.run().map_err(|e| e.to_string())?;
    Ok(E2eCase { inputs, tokens, sim, outcomes })
}

/// 8. Identity round trips and chunk counts.
fn e2e_correctness(case: &E2eCase) -> Outcome {
    for (i, (o, input)) in case.outcomes.iter().zip(&case.inputs).enumerate() {
        ensure(o.status == JobStatus::Ok, format!("job {i}: {:?}", o.status))?;
        ensure(o.output.as_deref() == Some(&input[..]), format!("job {i}: output differs from input"))?;
        let want = case.tokens[i].div_ceil(7500).max(1);
        let got = case.sim.job_boxes(i as u64).unwrap().0.len();
        ensure(got == want, format!("job {i}: {} tokens in {got} boxes, want {want}", case.tokens[i]))?;
    }
    Ok(format!("{} jobs byte-identical, oversize chunk counts 2/2/3/4", case.outcomes.len()))
}

/// 10. Constant wire image and opaque traces.
fn wire_image(case: &E2eCase, extra: &[ObserverTrace]) -> Outcome {
    let mut events = 0;
    let main = case.sim.observer_view();
    for t in std::iter::once(&main).chain(extra) {
        for e in &t.events {
            ensure(e.size == 31_000, format!("event of {} bytes", e.size))?;
            events += 1;
        }
    }
    ensure(case.sim.trace_stats().size_violations == 0, "simulator counted size violations")?;
    let text = main.to_jsonl();
    let mut probes = 0;
    for (i, input) in case.inputs.iter().enumerate() {
        if input.len() >= 16 {
            ensure(!text.contains(&hex::encode(&input[..16])), format!("payload of job {i} in trace"))?;
            probes += 1;
        }
        let (ins, outs) = case.sim.job_boxes(i as u64).unwrap();
        for id in ins.iter().chain(&outs) {
            ensure(!text.contains(&hex::encode(id)), format!("Box-ID of job {i} in trace"))?;
            ensure(!text.contains(&hex::encode(&id[..8])), format!("Box-ID prefix of job {i} in trace"))?;
            probes += 1;
        }
    }
    Ok(format!("{events} events all 31000 B, {probes} payload/Box-ID probes absent"))
}

/// 9. Distinguisher with and without bucketing.
fn iou() -> Result<(String, Vec<ObserverTrace>), String> {
    let cfg = RunConfig { seed: 1009, ..default_iou_config() };
    let on = run_iou_experiment(&cfg, 2000).map_err(|e| e.to_string())?;
    let off = run_iou_experiment(&RunConfig { bucketing: false, ..cfg.clone() }, 2000).map_err(|e| e.to_string())?;
    let detail = format!(
        "bucketing acc={:.4} CI=[{:.4}, {:.4}]; ablated acc={:.4}",
        on.adversary_accuracy, on.confidence_interval.0, on.confidence_interval.1, off.adversary_accuracy
    );
    ensure(on.ci_contains(0.5), format!("CI misses 0.5: {detail}"))?;
    ensure(off.adversary_accuracy > 0.95, format!("ablated accuracy too low: {detail}"))?;
    ensure(off.adversary_accuracy >= on.adversary_accuracy, format!("ablation ordering: {detail}"))?;

    // One traced world of each kind for the wire-image check.
    let mut traces = Vec::new();
    for bucketing in [true, false] {
        let c = RunConfig { bucketing, ..cfg.clone() };
        let mut sim = Simulation::new(c.sim_config(c.seed)).map_err(|e| e.to_string())?;
        for (i, j) in c.jobs.iter().enumerate() {
            sim.submit(job_spec(&c, i as u64, j)).map_err(|e| e.to_string())?;
        }
        sim.run().map_err(|e| e.to_string())?;
        traces.push(sim.observer_view());
    }
    Ok((detail, traces))
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// 11. Every output file is byte-identical on rerun.
fn determinism() -> Outcome {
    let produce = |dir: &Path| -> Result<(), String> {
        let run = RunConfig {
            seed: 1011,
            jobs: vec![
                JobConfig { count: 1500, ttft: 0.1, ..JobConfig::default() },
                JobConfig { count: 20, bucket_index: 10, ttft: 2.5, stub: "reverse".into(), ..JobConfig::default() },
            ],
            ..RunConfig::default()
        };
        run_e2e(&run, Some(&dir.join("e2e"))).map_err(|e| e.to_string())?;
        emit_tables(&dir.join("tables"), 0.2, 0.2, 5).map_err(|e| e.to_string())?;
        write_bacap_vectors(&dir.join("vectors"), 1011, 4).map_err(|e| e.to_string())?;
        let report = run_iou_experiment(&RunConfig { seed: 1011, ..default_iou_config() }, 50).map_err(|e| e.to_string())?;
        fs::write(dir.join("iou_report.json"), serde_json::to_string_pretty(&report).unwrap()).map_err(|e| e.to_string())?;
        Ok(())
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    produce(a.path())?;
    produce(b.path())?;
    let mut compared = 0;
    for sub in ["e2e", "tables", "vectors"] {
        let x = read_dir_sorted(&a.path().join(sub));
        let y = read_dir_sorted(&b.path().join(sub));
        ensure(x.len() == y.len() && !x.is_empty(), format!("{sub}: file sets differ"))?;
        for ((nx, bx), (ny, by)) in x.iter().zip(&y) {
            ensure(nx == ny && bx == by, format!("{sub}/{nx} differs"))?;
            compared += 1;
        }
    }
    ensure(
        fs::read(a.path().join("iou_report.json")).unwrap() == fs::read(b.path().join("iou_report.json")).unwrap(),
        "iou_report.json differs",
    )?;
    Ok(format!("{} files byte-identical", compared + 1))
}

fn run(results: &mut Vec<bool>, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => println!("PASS [{n:>2}] {name} ({secs:.1}s): {d}"),
        Err(d) => println!("FAIL [{n:>2}] {name} ({secs:.1}s): {d}"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, 1, "echo latency", echo_latency);
    run(&mut results, 2, "pipeline latency", pipeline_latency);
    run(&mut results, 3, "llm latency table", table3);
    run(&mut results, 4, "overhead table", table4);
    run(&mut results, 5, "bandwidth", bandwidth);
    run(&mut results, 6, "bacap properties", bacap_suite);
    run(&mut results, 7, "bucket policy", bucket_policy);

    let case = catch_unwind(e2e_case).unwrap_or_else(|_| Err("panicked".into()));
    run(&mut results, 8, "end-to-end correctness", || {
        case.as_ref().map_err(|e| e.clone()).and_then(e2e_correctness)
    });
    let mut traces = Vec::new();
    run(&mut results, 9, "io-u distinguisher", || {
        iou().map(|(d, t)| {
            traces = t;
            d
        })
    });
    run(&mut results, 10, "constant wire image", || {
        case.as_ref().map_err(|e| e.clone()).and_then(|c| wire_image(c, &traces))
    });
    run(&mut results, 11, "determinism", determinism);

    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
