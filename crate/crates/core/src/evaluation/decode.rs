use crate::geometry::{nms, ObjectClass, RotatedBox};
use crate::network::{HeadOutput, NUM_CLASSES};
use crate::numerics::{Real, Tensor};
use crate::pillars::GridSpec;
use crate::training::TargetMaps;

/// Boxes from a head output: per cell the best non-background class, kept
/// when its probability reaches `score_threshold` and beats background,
/// followed by per-class NMS at `nms_iou`.
pub fn decode_detections<T: Real>(
    head: &HeadOutput<T>,
    grid: &GridSpec,
    score_threshold: f64,
    nms_iou: f64,
) -> Vec<RotatedBox> {
    let (rows, cols) = (head.rows(), head.cols());
    let cell = grid.out_cell();
    let (p, loc, size, hd) = (
        head.probs.data(),
        head.loc.data(),
        head.size.data(),
        head.heading.data(),
    );
    let mut boxes = Vec::new();
    for c in 0..rows * cols {
        let row = &p[c * NUM_CLASSES..(c + 1) * NUM_CLASSES];
        let mut best = 1;
        for k in 2..NUM_CLASSES {
            if row[k] > row[best] {
                best = k;
            }
        }
        let score = row[best].as_f64();
        if score < score_threshold || row[0].as_f64() > score {
            continue;
        }
        let (i, j) = (c / cols, c % cols);
        let px = grid.x_min + (i as f64 + 0.5) * cell;
        let py = grid.y_min + (j as f64 + 0.5) * cell;
        let l = &loc[c * 3..c * 3 + 3];
        let s = &size[c * 3..c * 3 + 3];
        let (sn, cs) = (hd[c * 2].as_f64(), hd[c * 2 + 1].as_f64());
        let norm = sn.hypot(cs);
        let yaw = if norm > 0.0 {
            (sn / norm).atan2(cs / norm)
        } else {
            0.0
        };
        let class = ObjectClass::from_channel(best).expect("detected channel");
        let b = RotatedBox::new(
            px + l[0].as_f64(),
            py + l[1].as_f64(),
            l[2].as_f64(),
            s[0].as_f64(),
            s[1].as_f64(),
            s[2].as_f64(),
            yaw,
            class,
        )
        .with_score(score);
        if !b.is_degenerate() {
            boxes.push(b);
        }
    }
    nms(&boxes, nms_iou)
}

/// A head output that predicts `targets` exactly: one-hot probabilities and
/// the regression targets on foreground cells.
pub fn encode_targets(targets: &TargetMaps) -> HeadOutput<f64> {
    let n = targets.cells();
    let shape = |c: usize| [1, targets.rows, targets.cols, c];
    let mut probs = Tensor::zeros(&shape(NUM_CLASSES));
    let mut loc = Tensor::zeros(&shape(3));
    let mut size = Tensor::zeros(&shape(3));
    let mut heading = Tensor::zeros(&shape(2));
    for c in 0..n {
        probs.data_mut()[c * NUM_CLASSES + targets.class[c] as usize] = 1.0;
        let r = &targets.reg[c];
        loc.data_mut()[c * 3..c * 3 + 3].copy_from_slice(&r[..3]);
        size.data_mut()[c * 3..c * 3 + 3].copy_from_slice(&r[3..6]);
        heading.data_mut()[c * 2..c * 2 + 2].copy_from_slice(&r[6..]);
    }
    HeadOutput {
        probs,
        loc,
        size,
        heading,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_scene, SceneConfig};
    use crate::training::build_targets;

    #[test]
    fn all_background_is_empty() {
        let g = GridSpec::desk();
        let t = build_targets(&[], &g);
        assert!(decode_detections(&encode_targets(&t), &g, 0.0, 0.5).is_empty());
    }

    #[test]
    fn heading_from_sin_cos() {
        let g = GridSpec::desk();
        let b = RotatedBox::new(10.5, 0.5, -1.0, 4.0, 2.0, 1.5, 0.0, ObjectClass::Vehicle);
        let t = build_targets(&[b], &g);
        let mut h = encode_targets(&t);
        let (i, j) = g.out_cell_of(10.5, 0.5).unwrap();
        let c = i * g.out_cols() + j;
        h.heading.data_mut()[c * 2] = 1.2;
        h.heading.data_mut()[c * 2 + 1] = 1.6;
        let d = decode_detections(&h, &g, 0.5, 0.5);
        assert_eq!(d.len(), 1);
        assert!((d[0].yaw - 0.6f64.atan2(0.8)).abs() < 1e-12);
        assert!((d[0].yaw - 0.6435).abs() < 1e-4);
    }

    #[test]
    fn threshold_and_background() {
        let g = GridSpec::desk();
        let b = RotatedBox::new(10.5, 0.5, -1.0, 4.0, 2.0, 1.5, 0.0, ObjectClass::Cyclist);
        let t = build_targets(&[b], &g);
        let mut h = encode_targets(&t);
        let (i, j) = g.out_cell_of(10.5, 0.5).unwrap();
        let c = i * g.out_cols() + j;
        h.probs.data_mut()[c * 4..c * 4 + 4].copy_from_slice(&[0.3, 0.1, 0.4, 0.2]);
        let d = decode_detections(&h, &g, 0.35, 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class, ObjectClass::Cyclist);
        assert_eq!(d[0].score, 0.4);
        assert!(decode_detections(&h, &g, 0.45, 0.5).is_empty());
        h.probs.data_mut()[c * 4..c * 4 + 4].copy_from_slice(&[0.5, 0.1, 0.3, 0.1]);
        assert!(decode_detections(&h, &g, 0.0, 0.5).is_empty());
    }

    #[test]
    fn round_trip_on_generated_scenes() {
        let g = GridSpec::desk();
        for seed in 0..20 {
            let seq = generate_scene(&SceneConfig {
                seed,
                n_scans: 1,
                spawn_x: [1.0, 47.0],
                spawn_y: [-15.0, 15.0],
                ..Default::default()
            })
            .unwrap();
            let t = build_targets(&seq.annotations, &g);
            let dec = decode_detections(&encode_targets(&t), &g, 0.5, 1.0);
            let mut expect: Vec<&RotatedBox> = seq
                .annotations
                .iter()
                .filter(|b| b.class != ObjectClass::Unclear && g.out_cell_of(b.cx, b.cy).is_some())
                .collect();
            // Cell conflicts resolve towards the ego.
            expect.retain(|b| {
                let cell = g.out_cell_of(b.cx, b.cy);
                !seq.annotations.iter().any(|o| {
                    !std::ptr::eq(o, *b)
                        && g.out_cell_of(o.cx, o.cy) == cell
                        && o.range() < b.range()
                })
            });
            assert_eq!(dec.len(), expect.len(), "seed {seed}");
            for e in expect {
                let d = dec
                    .iter()
                    .find(|d| (d.cx - e.cx).abs() < 1e-6 && (d.cy - e.cy).abs() < 1e-6)
                    .expect("decoded");
                assert_eq!(d.class, e.class);
                for (a, b) in [(d.cz, e.cz), (d.l, e.l), (d.w, e.w), (d.h, e.h)] {
                    assert!((a - b).abs() < 1e-6);
                }
                let dy = (d.yaw - e.yaw).abs();
                assert!(dy.min(2.0 * std::f64::consts::PI - dy) < 1e-6);
            }
        }
    }
}
