use super::boxes::{rotated_iou_bev, RotatedBox};

/// Indices kept by greedy per-class NMS, in descending score order.
/// Ties in score keep the lower input index first. A box is suppressed when
/// its IoU with an already kept box of the same class reaches `iou_threshold`.
pub fn nms_indices(boxes: &[RotatedBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // Stable sort keeps index order among equal scores.
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &boxes[i];
        let suppressed = kept
            .iter()
            .any(|&k| boxes[k].class == b.class && rotated_iou_bev(&boxes[k], b) >= iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(boxes: &[RotatedBox], iou_threshold: f64) -> Vec<RotatedBox> {
    nms_indices(boxes, iou_threshold)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}
