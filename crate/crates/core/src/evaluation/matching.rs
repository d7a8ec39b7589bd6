use std::collections::HashMap;

use crate::geometry::RotatedBox;

/// One detection assigned to one ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub det: usize,
    pub gt: usize,
    /// BEV center distance.
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// In the order detections were considered (descending score).
    pub matches: Vec<Match>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Detection indices by descending score; ties keep input order.
pub fn score_order(dets: &[RotatedBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

fn bev_distance(a: &RotatedBox, b: &RotatedBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Greedy one-to-one matching: in descending score order each detection
/// takes the nearest unmatched ground truth of its class within
/// `max_distance` (ties go to the lower index).
pub fn match_detections(dets: &[RotatedBox], gts: &[RotatedBox], max_distance: f64) -> MatchResult {
    let bucket = max_distance.max(1e-3);
    let key = |b: &RotatedBox| {
        (
            (b.cx / bucket).floor() as i64,
            (b.cy / bucket).floor() as i64,
        )
    };
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (g, b) in gts.iter().enumerate() {
        buckets.entry(key(b)).or_default().push(g);
    }
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for d in score_order(dets) {
        let det = &dets[d];
        let (kx, ky) = key(det);
        let mut best: Option<(f64, usize)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(cands) = buckets.get(&(kx + dx, ky + dy)) else {
                    continue;
                };
                for &g in cands {
                    if taken[g] || gts[g].class != det.class {
                        continue;
                    }
                    let dist = bev_distance(det, &gts[g]);
                    if dist > max_distance {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bg)) => dist < bd || (dist == bd && g < bg),
                    };
                    if better {
                        best = Some((dist, g));
                    }
                }
            }
        }
        match best {
            Some((distance, g)) => {
                taken[g] = true;
                out.matches.push(Match {
                    det: d,
                    gt: g,
                    distance,
                });
            }
            None => out.unmatched_dets.push(d),
        }
    }
    out.unmatched_gts = (0..gts.len()).filter(|&g| !taken[g]).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ObjectClass;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, class: ObjectClass, score: f64) -> RotatedBox {
        RotatedBox::new(x, y, 0.0, 1.0, 1.0, 1.0, 0.0, class).with_score(score)
    }

    /// Every detection scans the full ground-truth list.
    fn exhaustive(dets: &[RotatedBox], gts: &[RotatedBox], thr: f64) -> MatchResult {
        let mut taken = vec![false; gts.len()];
        let mut out = MatchResult::default();
        for d in score_order(dets) {
            let mut best: Option<(f64, usize)> = None;
            for g in 0..gts.len() {
                let dist =
                    ((dets[d].cx - gts[g].cx).powi(2) + (dets[d].cy - gts[g].cy).powi(2)).sqrt();
                if !taken[g]
                    && gts[g].class == dets[d].class
                    && dist <= thr
                    && best.is_none_or(|(bd, _)| dist < bd)
                {
                    best = Some((dist, g));
                }
            }
            match best {
                Some((dist, g)) => {
                    taken[g] = true;
                    out.matches.push(Match {
                        det: d,
                        gt: g,
                        distance: dist,
                    });
                }
                None => out.unmatched_dets.push(d),
            }
        }
        out.unmatched_gts = (0..gts.len()).filter(|&g| !taken[g]).collect();
        out
    }

    #[test]
    fn exact_center_matches() {
        let g = [bx(3.0, 4.0, ObjectClass::Vehicle, 1.0)];
        for thr in [1e-9, 0.5, 4.0] {
            let r = match_detections(&g, &g, thr);
            assert_eq!(r.matches.len(), 1);
        }
    }

    #[test]
    fn higher_score_wins() {
        let g = [bx(0.0, 0.0, ObjectClass::Vehicle, 1.0)];
        let d = [
            bx(0.1, 0.0, ObjectClass::Vehicle, 0.3),
            bx(0.4, 0.0, ObjectClass::Vehicle, 0.9),
        ];
        let r = match_detections(&d, &g, 2.0);
        assert_eq!(
            r.matches,
            vec![Match {
                det: 1,
                gt: 0,
                distance: 0.4
            }]
        );
        assert_eq!(r.unmatched_dets, vec![0]);
    }

    #[test]
    fn class_consistent() {
        let g = [bx(0.0, 0.0, ObjectClass::Vehicle, 1.0)];
        let d = [bx(0.0, 0.0, ObjectClass::Pedestrian, 1.0)];
        let r = match_detections(&d, &g, 2.0);
        assert!(r.matches.is_empty());
        assert_eq!(r.unmatched_gts, vec![0]);
    }

    #[test]
    fn equals_exhaustive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let classes = ObjectClass::DETECTED;
        for trial in 0..300 {
            let n_g = rng.random_range(0..25);
            let n_d = rng.random_range(0..30);
            let side = rng.random_range(2.0..30.0);
            let pick = |rng: &mut ChaCha8Rng| {
                // Coarse lattice values force distance and score ties.
                let x = (rng.random_range(-side..side) * 4.0f64).round() / 4.0;
                let y = (rng.random_range(-side..side) * 4.0f64).round() / 4.0;
                let s = (rng.random_range(0.0..1.0) * 10.0f64).round() / 10.0;
                bx(x, y, classes[rng.random_range(0..3)], s)
            };
            let gts: Vec<_> = (0..n_g).map(|_| pick(&mut rng)).collect();
            let dets: Vec<_> = (0..n_d).map(|_| pick(&mut rng)).collect();
            for thr in [0.5, 1.0, 2.0, 4.0] {
                let a = match_detections(&dets, &gts, thr);
                let b = exhaustive(&dets, &gts, thr);
                assert_eq!(a, b, "trial {trial} thr {thr}");
                let mut used: Vec<usize> = a.matches.iter().map(|m| m.gt).collect();
                used.sort();
                used.dedup();
                assert_eq!(used.len(), a.matches.len());
                assert!(a
                    .matches
                    .iter()
                    .all(|m| dets[m.det].class == gts[m.gt].class));
            }
        }
    }
}
