//! Show how the release edge hides compute time: every job in a bucket is
//! released at the same offset, and slow ones report overflow.

use funion::protocol::{round_up_to_bucket, wait_for_bucket_edge, BucketGrid};

fn main() {
    let grid = BucketGrid::default();
    let t_j = grid.edge(20).unwrap();
    println!("grid step {} s, {} edges; chosen edge t_20 = {t_j} s", grid.delta, grid.n);
    for t_finish in [0.5, 2.0, 3.99, 4.0, 6.5] {
        let (status, release) = wait_for_bucket_edge(&grid, t_j, t_finish).unwrap();
        println!("  finished after {t_finish:>4} s -> {status:?} released at {release} s");
    }
    for t in [3.85, 19.41, 38.59, 10.34] {
        println!("  t_LLM {t:>5} s rounds up to {:.2} s", round_up_to_bucket(t, grid.delta));
    }
    let j = grid.smallest_safe_index(3.85).unwrap();
    println!("smallest safe index for 3.85 s is {j} ({:.2} s)", grid.edge(j).unwrap());
}
