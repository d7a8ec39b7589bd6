use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Cyclist,
    Pedestrian,
    /// Annotated but ambiguous; excluded from every loss and metric.
    Unclear,
}

impl ObjectClass {
    /// Classes the detector predicts, in head-channel order after background.
    pub const DETECTED: [ObjectClass; 3] = [
        ObjectClass::Vehicle,
        ObjectClass::Cyclist,
        ObjectClass::Pedestrian,
    ];

    /// Head channel (0 is background). `None` for [`ObjectClass::Unclear`].
    pub fn channel(self) -> Option<usize> {
        match self {
            ObjectClass::Vehicle => Some(1),
            ObjectClass::Cyclist => Some(2),
            ObjectClass::Pedestrian => Some(3),
            ObjectClass::Unclear => None,
        }
    }

    pub fn from_channel(ch: usize) -> Option<ObjectClass> {
        ObjectClass::DETECTED.get(ch.checked_sub(1)?).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Cyclist => "cyclist",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Unclear => "unclear",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "vehicle" => Ok(ObjectClass::Vehicle),
            "cyclist" => Ok(ObjectClass::Cyclist),
            "pedestrian" => Ok(ObjectClass::Pedestrian),
            "unclear" => Ok(ObjectClass::Unclear),
            other => Err(Error::InvalidArgument(format!("unknown class {other:?}"))),
        }
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_yaw(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// BEV-rotated 3D box. `l` runs along the heading, `w` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class: ObjectClass,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl RotatedBox {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        l: f64,
        w: f64,
        h: f64,
        yaw: f64,
        class: ObjectClass,
    ) -> Self {
        RotatedBox {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw: normalize_yaw(yaw),
            class,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// Distance of the BEV center from the ego origin.
    pub fn range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.l > 0.0 && self.w > 0.0) || !self.l.is_finite() || !self.w.is_finite()
    }

    /// BEV corners, counter-clockwise.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(u, v)| [self.cx + c * u - s * v, self.cy + s * u + c * v])
    }

    pub fn area_bev(&self) -> f64 {
        self.l * self.w
    }

    /// Whether the BEV point lies inside (or on) the footprint.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let s: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum();
    0.5 * s.abs()
}

/// Sutherland–Hodgman: clips `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let dc = cross(a, b, cur);
            let dp = cross(a, b, prev);
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the BEV footprint intersection.
pub fn intersection_area_bev(a: &RotatedBox, b: &RotatedBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    // Cheap reject on circumscribed circles.
    let ra = a.l.hypot(a.w) / 2.0;
    let rb = b.l.hypot(b.w) / 2.0;
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    shoelace(&clip_convex(&a.corners(), &b.corners()))
}

/// Exact BEV intersection-over-union of two rotated rectangles.
pub fn rotated_iou_bev(a: &RotatedBox, b: &RotatedBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = intersection_area_bev(a, b);
    let union = a.area_bev() + b.area_bev() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, 0.0, l, w, 1.0, yaw, ObjectClass::Vehicle)
    }

    #[test]
    fn identical_boxes_iou_one() {
        let a = bx(3.0, -2.0, 4.5, 1.9, 0.4);
        assert!((rotated_iou_bev(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_overlapping_unit_squares() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou_bev(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_and_degenerate_are_zero() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou_bev(&a, &bx(5.0, 0.0, 1.0, 1.0, 0.3)), 0.0);
        assert_eq!(rotated_iou_bev(&a, &bx(0.0, 0.0, 0.0, 1.0, 0.0)), 0.0);
    }

    #[test]
    fn rotated_square_inside_square() {
        // A unit square rotated 45° inside a 2×2 square: IoU = 1/4.
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        assert!((rotated_iou_bev(&a, &b) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn yaw_normalization_range() {
        assert_eq!(normalize_yaw(-PI), PI);
        assert_eq!(normalize_yaw(PI), PI);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_yaw(0.0), 0.0);
    }

    #[test]
    fn class_channels_round_trip() {
        for c in ObjectClass::DETECTED {
            assert_eq!(ObjectClass::from_channel(c.channel().unwrap()), Some(c));
            assert_eq!(c.as_str().parse::<ObjectClass>().unwrap(), c);
        }
        assert_eq!(ObjectClass::from_channel(0), None);
        assert!("truck".parse::<ObjectClass>().is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in -3.0f64..3.0, ay in -3.0f64..3.0, al in 0.2f64..5.0, aw in 0.2f64..3.0, ayaw in -3.2f64..3.2,
            bx_ in -3.0f64..3.0, by in -3.0f64..3.0, bl in 0.2f64..5.0, bw in 0.2f64..3.0, byaw in -3.2f64..3.2,
        ) {
            let a = bx(ax, ay, al, aw, ayaw);
            let b = bx(bx_, by, bl, bw, byaw);
            let ab = rotated_iou_bev(&a, &b);
            let ba = rotated_iou_bev(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((rotated_iou_bev(&a, &a) - 1.0).abs() < 1e-9);
        }
    }
}
