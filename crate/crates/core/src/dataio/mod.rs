//! Scans, sequences, the point budget, the on-disk format, and the
//! synthetic scene generator.

mod format;
mod generator;

pub use format::{load_scan, load_sequence, save_scan, save_sequence, SCAN_MAGIC, SCAN_VERSION};
pub use generator::{generate_scene, ClassPrior, SceneConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Pose, RotatedBox};

/// Most scans a sequence may hold: ten past scans plus the core frame.
pub const MAX_SCANS: usize = 11;

/// One LiDAR sweep in its own ego frame. Rows are `x, y, z, intensity`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub points: Vec<[f32; 4]>,
    pub pose: Pose,
    pub timestamp: f64,
}

impl Scan {
    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        if !self.timestamp.is_finite() {
            return Err(Error::InvalidArgument(
                "scan timestamp is not finite".into(),
            ));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("scan point {i}")));
        }
        Ok(())
    }
}

/// Past scans followed by the annotated core frame (the last scan).
/// Annotations are expressed in the core frame's ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    scans: Vec<Scan>,
    pub annotations: Vec<RotatedBox>,
}

impl Sequence {
    pub fn new(scans: Vec<Scan>, annotations: Vec<RotatedBox>) -> Result<Self> {
        if scans.is_empty() || scans.len() > MAX_SCANS {
            return Err(Error::InvalidArgument(format!(
                "a sequence holds 1..={MAX_SCANS} scans, got {}",
                scans.len()
            )));
        }
        for s in &scans {
            s.validate()?;
        }
        for w in scans.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::InvalidArgument(format!(
                    "timestamps must increase strictly ({} then {})",
                    w[0].timestamp, w[1].timestamp
                )));
            }
        }
        for b in &annotations {
            if !(b.l > 0.0 && b.w > 0.0 && b.h > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "annotation with non-positive dims: {b:?}"
                )));
            }
        }
        Ok(Sequence { scans, annotations })
    }

    pub fn scans(&self) -> &[Scan] {
        &self.scans
    }

    pub fn core(&self) -> &Scan {
        self.scans.last().expect("sequence is never empty")
    }

    /// Scans before the core frame.
    pub fn past_len(&self) -> usize {
        self.scans.len() - 1
    }

    /// The last `n` scans (core included) as a new sequence.
    pub fn tail(&self, n: usize) -> Sequence {
        let n = n.clamp(1, self.scans.len());
        Sequence {
            scans: self.scans[self.scans.len() - n..].to_vec(),
            annotations: self.annotations.clone(),
        }
    }
}

/// Uniform subsample without replacement down to `budget` rows, keeping
/// input order. Inputs at or under budget pass through unchanged.
pub fn apply_point_budget<P: Clone>(points: &[P], budget: usize, seed: u64) -> Vec<P> {
    if points.len() <= budget {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, points.len(), budget).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn scan(t: f64) -> Scan {
        Scan {
            points: vec![[1.0, 2.0, 0.0, 0.5]],
            pose: Pose::identity(),
            timestamp: t,
        }
    }

    #[test]
    fn budget_at_size_is_identity() {
        let pts: Vec<u32> = (0..7).collect();
        assert_eq!(apply_point_budget(&pts, 7, 1), pts);
        assert_eq!(apply_point_budget(&pts, 100, 1), pts);
    }

    #[test]
    fn budget_small_subset_is_deterministic() {
        let pts: Vec<u32> = (0..10).collect();
        let a = apply_point_budget(&pts, 5, 42);
        assert_eq!(a, apply_point_budget(&pts, 5, 42));
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|v| pts.contains(v)));
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 5);
    }

    #[test]
    fn budget_large_cloud() {
        let pts: Vec<u32> = (0..300_000).collect();
        let out = apply_point_budget(&pts, 200_000, 3);
        assert_eq!(out.len(), 200_000);
        assert!(out.windows(2).all(|w| w[0] < w[1]));
        assert!(out.iter().all(|&v| v < 300_000));
    }

    #[test]
    fn sequence_rejects_bad_timestamps() {
        assert!(Sequence::new(vec![scan(1.0), scan(1.0)], vec![]).is_err());
        assert!(Sequence::new(vec![scan(1.0), scan(0.5)], vec![]).is_err());
        assert!(Sequence::new(vec![], vec![]).is_err());
        let s = Sequence::new(vec![scan(0.0), scan(0.1)], vec![]).unwrap();
        assert_eq!(s.past_len(), 1);
        assert_eq!(s.tail(1).scans().len(), 1);
    }

    #[test]
    fn sequence_rejects_non_finite_points() {
        let mut s = scan(0.0);
        s.points.push([f32::NAN, 0.0, 0.0, 0.0]);
        assert!(Sequence::new(vec![s], vec![]).is_err());
    }
}
