use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::matching::match_detections;
use crate::geometry::{normalize_yaw, ObjectClass, RotatedBox};

/// Center-distance thresholds (meters) averaged into AP.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold whose matches feed the true-positive errors.
pub const TP_THRESHOLD: f64 = 2.0;
/// Range bins `[lo, hi)`; `None` is unbounded.
pub const DISTANCE_BINS: [(f64, Option<f64>); 3] =
    [(0.0, Some(50.0)), (50.0, Some(100.0)), (100.0, None)];

/// Trapezoidal area under the precision/recall curve of detections listed
/// in descending score order. The curve starts at recall 0 with the first
/// precision. `None` without ground truths.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut area = 0.0;
    let (mut hits, mut prev_r, mut prev_p) = (0usize, 0.0, None::<f64>);
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        let p = hits as f64 / (i + 1) as f64;
        let r = hits as f64 / n_gt as f64;
        let pp = prev_p.unwrap_or(p);
        area += (r - prev_r) * 0.5 * (p + pp);
        prev_r = r;
        prev_p = Some(p);
    }
    Some(area)
}

/// Sorts `(score, tp)` pairs by descending score (stable) and integrates.
pub fn ap_from_scored(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let tp: Vec<bool> = s.iter().map(|x| x.1).collect();
    ap_from_ranked(&tp, n_gt)
}

/// AP of one class in one frame, averaged over `thresholds`.
pub fn average_precision(
    dets: &[RotatedBox],
    gts: &[RotatedBox],
    class: ObjectClass,
    thresholds: &[f64],
) -> Option<f64> {
    let d: Vec<RotatedBox> = dets.iter().filter(|b| b.class == class).copied().collect();
    let g: Vec<RotatedBox> = gts.iter().filter(|b| b.class == class).copied().collect();
    if g.is_empty() {
        return None;
    }
    let sum: f64 = thresholds
        .iter()
        .map(|&t| {
            ap_from_scored(&scored_detections(&d, &g, t), g.len()).expect("ground truths present")
        })
        .sum();
    Some(sum / thresholds.len() as f64)
}

fn scored_detections(dets: &[RotatedBox], gts: &[RotatedBox], thr: f64) -> Vec<(f64, bool)> {
    let m = match_detections(dets, gts, thr);
    let mut tp = vec![false; dets.len()];
    for x in &m.matches {
        tp[x.det] = true;
    }
    dets.iter().zip(tp).map(|(d, t)| (d.score, t)).collect()
}

/// IoU of two boxes after moving them onto a common center and heading.
pub fn aligned_iou_3d(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let inter = a.l.min(b.l).max(0.0) * a.w.min(b.w).max(0.0) * a.h.min(b.h).max(0.0);
    let union = a.l * a.w * a.h + b.l * b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Absolute heading difference wrapped to `[0, π]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    normalize_yaw(a - b).abs().min(PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
    };
}

/// Mean translation, scale and orientation errors over `(detection, truth)`
/// pairs. Translation is divided by the truth's range when
/// `range_normalized`. No pairs gives the worst case 1.0 for each.
pub fn tp_errors(pairs: &[(RotatedBox, RotatedBox)], range_normalized: bool) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let mut s = ErrorSums::default();
    for (d, g) in pairs {
        s.add(d, g, range_normalized);
    }
    s.mean()
}

pub fn nds(map: f64, ate: f64, ase: f64, aoe: f64) -> f64 {
    let tp: f64 = [ate, ase, aoe].iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 8.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ErrorSums {
    ate: f64,
    ase: f64,
    aoe: f64,
    n: usize,
}

impl ErrorSums {
    fn add(&mut self, d: &RotatedBox, g: &RotatedBox, range_normalized: bool) {
        let dist = (d.cx - g.cx).hypot(d.cy - g.cy);
        self.ate += if range_normalized {
            dist / g.range().max(1.0)
        } else {
            dist
        };
        self.ase += 1.0 - aligned_iou_3d(d, g);
        self.aoe += yaw_error(d.yaw, g.yaw);
        self.n += 1;
    }

    fn mean(&self) -> TpErrors {
        if self.n == 0 {
            return TpErrors::WORST;
        }
        let n = self.n as f64;
        TpErrors {
            ate: self.ate / n,
            ase: self.ase / n,
            aoe: self.aoe / n,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ClassAccum {
    n_gt: usize,
    n_det: usize,
    scored: [Vec<(f64, bool)>; 4],
    errors: ErrorSums,
}

/// Per-frame evidence for every class, mergeable across frames and workers.
/// Matching happens within a frame; ranking happens over the merged set.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    classes: [ClassAccum; 3],
    pub frames: usize,
    pub range_normalized_ate: bool,
}

impl EvalAccumulator {
    pub fn new(range_normalized_ate: bool) -> Self {
        EvalAccumulator {
            range_normalized_ate,
            ..Default::default()
        }
    }

    /// Adds one frame. Unclear boxes are not evaluated.
    pub fn add_frame(&mut self, dets: &[RotatedBox], gts: &[RotatedBox]) {
        self.frames += 1;
        for (ci, class) in ObjectClass::DETECTED.iter().enumerate() {
            let d: Vec<RotatedBox> = dets.iter().filter(|b| b.class == *class).copied().collect();
            let g: Vec<RotatedBox> = gts.iter().filter(|b| b.class == *class).copied().collect();
            let acc = &mut self.classes[ci];
            acc.n_gt += g.len();
            acc.n_det += d.len();
            for (ti, &t) in DISTANCE_THRESHOLDS.iter().enumerate() {
                let m = match_detections(&d, &g, t);
                let mut tp = vec![false; d.len()];
                for x in &m.matches {
                    tp[x.det] = true;
                }
                acc.scored[ti].extend(d.iter().zip(&tp).map(|(b, &t)| (b.score, t)));
                if t == TP_THRESHOLD {
                    for x in &m.matches {
                        acc.errors
                            .add(&d[x.det], &g[x.gt], self.range_normalized_ate);
                    }
                }
            }
        }
    }

    /// Appends `other`, as if its frames had been added after ours.
    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.frames += other.frames;
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.n_gt += b.n_gt;
            a.n_det += b.n_det;
            for (x, y) in a.scored.iter_mut().zip(&b.scored) {
                x.extend_from_slice(y);
            }
            a.errors.ate += b.errors.ate;
            a.errors.ase += b.errors.ase;
            a.errors.aoe += b.errors.aoe;
            a.errors.n += b.errors.n;
        }
    }

    pub fn summary(&self) -> Summary {
        let mut per_class = Vec::new();
        for (ci, class) in ObjectClass::DETECTED.iter().enumerate() {
            let acc = &self.classes[ci];
            let by_thr: Vec<Option<f64>> = acc
                .scored
                .iter()
                .map(|s| ap_from_scored(s, acc.n_gt))
                .collect();
            let ap = by_thr
                .iter()
                .copied()
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            let e = acc.errors.mean();
            per_class.push(ClassMetrics {
                class: *class,
                ap,
                ap_by_threshold: by_thr,
                ate: e.ate,
                ase: e.ase,
                aoe: e.aoe,
                n_gt: acc.n_gt,
                n_det: acc.n_det,
                n_tp: acc.errors.n,
            });
        }
        let defined: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.ap.is_some()).collect();
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64, empty: f64| {
            if defined.is_empty() {
                empty
            } else {
                defined.iter().map(|c| f(c)).sum::<f64>() / defined.len() as f64
            }
        };
        let map = mean(&|c| c.ap.unwrap_or(0.0), 0.0);
        let (mate, mase, maoe) = (
            mean(&|c| c.ate, 1.0),
            mean(&|c| c.ase, 1.0),
            mean(&|c| c.aoe, 1.0),
        );
        Summary {
            map,
            mate,
            mase,
            maoe,
            nds: nds(map, mate, mase, maoe),
            per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ObjectClass,
    /// Undefined without ground truths of the class.
    pub ap: Option<f64>,
    pub ap_by_threshold: Vec<Option<f64>>,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub n_gt: usize,
    pub n_det: usize,
    /// Matches at the true-positive threshold.
    pub n_tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub nds: f64,
    pub per_class: Vec<ClassMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub lo: f64,
    /// `None` for the open-ended last bin.
    pub hi: Option<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub range_normalized_ate: bool,
    pub overall: Summary,
    pub bins: Vec<BinReport>,
}

fn in_bin(b: &RotatedBox, lo: f64, hi: Option<f64>) -> bool {
    let r = b.range();
    r >= lo && hi.is_none_or(|h| r < h)
}

/// Overall and per-range-bin accumulators.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub overall: EvalAccumulator,
    pub bins: Vec<(f64, Option<f64>, EvalAccumulator)>,
}

impl Evaluator {
    pub fn new(bins: &[(f64, Option<f64>)], range_normalized_ate: bool) -> Self {
        Evaluator {
            overall: EvalAccumulator::new(range_normalized_ate),
            bins: bins
                .iter()
                .map(|&(lo, hi)| (lo, hi, EvalAccumulator::new(range_normalized_ate)))
                .collect(),
        }
    }

    /// Ground truths go to the bin of their own range, detections to theirs.
    pub fn add_frame(&mut self, dets: &[RotatedBox], gts: &[RotatedBox]) {
        self.overall.add_frame(dets, gts);
        for (lo, hi, acc) in &mut self.bins {
            let d: Vec<RotatedBox> = dets
                .iter()
                .filter(|b| in_bin(b, *lo, *hi))
                .copied()
                .collect();
            let g: Vec<RotatedBox> = gts
                .iter()
                .filter(|b| in_bin(b, *lo, *hi))
                .copied()
                .collect();
            acc.add_frame(&d, &g);
        }
    }

    pub fn merge(&mut self, other: &Evaluator) {
        self.overall.merge(&other.overall);
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.2.merge(&b.2);
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            frames: self.overall.frames,
            range_normalized_ate: self.overall.range_normalized_ate,
            overall: self.overall.summary(),
            bins: self
                .bins
                .iter()
                .map(|(lo, hi, acc)| BinReport {
                    lo: *lo,
                    hi: *hi,
                    summary: acc.summary(),
                })
                .collect(),
        }
    }
}

/// Per-bin metrics over `(detections, ground truths)` frames.
pub fn distance_binned_eval(
    frames: &[(Vec<RotatedBox>, Vec<RotatedBox>)],
    bins: &[(f64, Option<f64>)],
) -> Vec<BinReport> {
    let mut ev = Evaluator::new(bins, false);
    for (d, g) in frames {
        ev.add_frame(d, g);
    }
    ev.report().bins
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "   -  ".to_string(), |v| format!("{v:6.4}"))
}

impl MetricsReport {
    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let o = &self.overall;
        let mut s = String::new();
        let ate_unit = if self.range_normalized_ate {
            " (range-normalized)"
        } else {
            " (m)"
        };
        let _ = writeln!(s, "frames  {}", self.frames);
        let _ = writeln!(s, "NDS     {:.4}", o.nds);
        let _ = writeln!(s, "mAP     {:.4}", o.map);
        let _ = writeln!(s, "mATE    {:.4}{ate_unit}", o.mate);
        let _ = writeln!(s, "mASE    {:.4}", o.mase);
        let _ = writeln!(s, "mAOE    {:.4} (rad)", o.maoe);
        let _ = writeln!(s);
        let _ = writeln!(s, "class       AP      ATE     ASE     AOE     gt     det");
        for c in &o.per_class {
            let _ = writeln!(
                s,
                "{:<10} {}  {:6.4}  {:6.4}  {:6.4}  {:5}  {:6}",
                c.class.as_str(),
                fmt_ap(c.ap),
                c.ate,
                c.ase,
                c.aoe,
                c.n_gt,
                c.n_det
            );
        }
        if !self.bins.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "range        vehicle cyclist pedestr.  mAP");
            for b in &self.bins {
                let label = match b.hi {
                    Some(h) => format!("[{:.0},{:.0})", b.lo, h),
                    None => format!("[{:.0},inf)", b.lo),
                };
                let aps: Vec<String> = b.summary.per_class.iter().map(|c| fmt_ap(c.ap)).collect();
                let _ = writeln!(s, "{label:<12} {}  {:6.4}", aps.join("  "), b.summary.map);
            }
        }
        s
    }
}
