//! Latency-bucket release policy.
//!
//! Results leave the compute service only at the client-chosen grid edge
//! `t_j`. A computation that has not finished strictly before `t_j` releases
//! an OVERFLOW marker at `t_j` instead, so the release time is a function of
//! the public bucket index alone.

use serde::{Deserialize, Serialize};

use super::ProtocolError;

/// Relative tolerance for deciding that a time sits on the grid.
const GRID_EPS: f64 = 1e-9;

/// Public grid `0 = t_0 < t_1 < … < t_n`, `t_m = m · delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketGrid {
    pub delta: f64,
    pub n: u32,
}

impl Default for BucketGrid {
    fn default() -> Self {
        Self { delta: 0.2, n: 600 }
    }
}

impl BucketGrid {
    pub fn new(delta: f64, n: u32) -> Result<Self, ProtocolError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(ProtocolError::Config(format!("delta must be positive, got {delta}")));
        }
        if n == 0 {
            return Err(ProtocolError::Config("grid needs at least one edge after t_0".into()));
        }
        Ok(Self { delta, n })
    }

    /// `t_j`; errors outside `1..=n`.
    pub fn edge(&self, j: u32) -> Result<f64, ProtocolError> {
        if j == 0 || j > self.n {
            return Err(ProtocolError::Config(format!(
                "bucket index {j} outside 1..={}",
                self.n
            )));
        }
        Ok(f64::from(j) * self.delta)
    }

    pub fn last_edge(&self) -> f64 {
        f64::from(self.n) * self.delta
    }

    /// Index of the grid edge equal to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<u32> {
        let k = t / self.delta;
        let kr = k.round();
        if kr < 0.0 || kr > f64::from(self.n) || (k - kr).abs() > GRID_EPS * kr.max(1.0) {
            return None;
        }
        Some(kr as u32)
    }

    /// Smallest index whose edge is strictly after `t_finish`.
    pub fn smallest_safe_index(&self, t_finish: f64) -> Option<u32> {
        let k = t_finish.max(0.0) / self.delta;
        let kr = k.round();
        let j = if (k - kr).abs() <= GRID_EPS * kr.max(1.0) { kr + 1.0 } else { k.ceil() };
        let j = u32::try_from(j as u64).ok()?;
        (j <= self.n).then_some(j)
    }
}

/// Smallest multiple of `delta` that is `>= t`.
pub fn round_up_to_bucket(t: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "delta must be positive");
    assert!(t >= 0.0, "time must be non-negative");
    let k = t / delta;
    let kr = k.round();
    let steps = if (k - kr).abs() <= GRID_EPS * kr.max(1.0) { kr } else { k.ceil() };
    steps * delta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketStatus {
    Ok,
    Overflow,
}

/// Decides what is released at edge `t_j` for a computation that finished
/// at `t_finish`, both relative to the bucket epoch. Release is always at
/// `t_j`.
pub fn wait_for_bucket_edge(
    grid: &BucketGrid,
    t_j: f64,
    t_finish: f64,
) -> Result<(BucketStatus, f64), ProtocolError> {
    match grid.index_of(t_j) {
        Some(j) if j >= 1 => {}
        _ => return Err(ProtocolError::Config(format!("t_j = {t_j} is not an edge of the grid"))),
    }
    if !(t_finish >= 0.0) {
        return Err(ProtocolError::Config(format!("t_finish must be >= 0, got {t_finish}")));
    }
    let status = if t_finish >= t_j {
        BucketStatus::Overflow
    } else {
        BucketStatus::Ok
    };
    Ok((status, t_j))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_examples() {
        assert!((round_up_to_bucket(19.41, 0.2) - 19.6).abs() < 1e-9);
        assert_eq!(round_up_to_bucket(0.0, 0.2), 0.0);
        assert!((round_up_to_bucket(38.59, 0.2) - 38.6).abs() < 1e-9);
        assert!((round_up_to_bucket(10.34, 0.2) - 10.4).abs() < 1e-9);
        // Exact multiples map to themselves despite binary representation.
        assert!((round_up_to_bucket(0.6, 0.2) - 0.6).abs() < 1e-12);
        assert!((round_up_to_bucket(19.6, 0.2) - 19.6).abs() < 1e-12);
        assert!((round_up_to_bucket(3.85, 1.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn wait_examples() {
        let g = BucketGrid::new(0.2, 100).unwrap();
        assert_eq!(wait_for_bucket_edge(&g, 1.0, 0.3).unwrap(), (BucketStatus::Ok, 1.0));
        assert_eq!(wait_for_bucket_edge(&g, 1.0, 1.0).unwrap(), (BucketStatus::Overflow, 1.0));
        assert!(wait_for_bucket_edge(&g, 1.05, 0.3).is_err());
        assert!(wait_for_bucket_edge(&g, 0.0, 0.0).is_err());
        assert!(wait_for_bucket_edge(&g, 1.0, -0.1).is_err());
    }

    #[test]
    fn grid_edges() {
        let g = BucketGrid::new(0.2, 5).unwrap();
        assert!(g.edge(0).is_err());
        assert!(g.edge(6).is_err());
        assert!((g.edge(5).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(g.index_of(0.6), Some(3));
        assert_eq!(g.index_of(0.61), None);
        assert_eq!(g.index_of(1.2), None);
        assert_eq!(g.smallest_safe_index(0.0), Some(1));
        assert_eq!(g.smallest_safe_index(0.2), Some(2));
        assert_eq!(g.smallest_safe_index(0.99), Some(5));
        assert_eq!(g.smallest_safe_index(1.0), None);
        assert!(BucketGrid::new(0.0, 5).is_err());
        assert!(BucketGrid::new(0.2, 0).is_err());
    }
}
