//! Run a handful of inference jobs through the five-echo pipeline and
//! print each job's latency breakdown.

use funion::protocol::{ComputeModel, JobSpec, JobStatus, SimConfig, Simulation, Stage, StubFn};

fn main() {
    let mut sim = Simulation::new(SimConfig { seed: 7, ..SimConfig::default() }).unwrap();
    let prompts = ["hello", "what is a mixnet?", "a longer prompt that still fits one box"];
    for (i, p) in prompts.iter().enumerate() {
        // Bucket 25 is a 5 s release edge; compute takes 1 to 3 s.
        let compute = ComputeModel::new(1.0 + i as f64, 0.0, 0, StubFn::reverse());
        sim.submit(JobSpec::new(i, p.as_bytes().to_vec(), 25, compute)).unwrap();
    }
    // This one cannot finish before its edge and comes back as OVERFLOW.
    sim.submit(JobSpec::new(3, b"too slow".to_vec(), 5, ComputeModel::fixed(2.0))).unwrap();

    for o in sim.run().unwrap() {
        let l = o.latency;
        let output = match (&o.status, &o.output) {
            (JobStatus::Ok, Some(out)) => String::from_utf8_lossy(out).into_owned(),
            (s, _) => s.as_str().to_uppercase(),
        };
        println!("job {}: {output:?}", o.job_id);
        for (stage, rtt) in Stage::ALL.iter().zip(l.echoes) {
            println!("    {stage:?}: {rtt:.2} s");
        }
        println!(
            "    mix {:.2} s + bucket {:.2} s = {:.2} s (released at +{:.1} s)",
            l.mix_time, l.compute_bucket_time, l.total, o.release_time
        );
    }
    println!("observer saw {} link events", sim.observer_view().events.len());
}
