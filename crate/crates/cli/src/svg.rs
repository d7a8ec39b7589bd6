//! Bird's-eye-view SVG rendering of a core frame.

use std::fmt::Write as _;

use recpillars::dataio::Sequence;
use recpillars::geometry::{ObjectClass, RotatedBox};
use recpillars::pillars::GridSpec;

/// Pixels per meter.
const SCALE: f64 = 6.0;

pub fn class_color(c: ObjectClass) -> &'static str {
    match c {
        ObjectClass::Vehicle => "#1f4fd1",
        ObjectClass::Cyclist => "#d12a1f",
        ObjectClass::Pedestrian => "#1a9c3a",
        ObjectClass::Unclear => "#888888",
    }
}

struct View {
    x_max: f64,
    y_max: f64,
}

impl View {
    /// Forward (x) points up, left (y) points left.
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        ((self.y_max - y) * SCALE, (self.x_max - x) * SCALE)
    }
}

fn draw_box(s: &mut String, v: &View, b: &RotatedBox, kind: &str) {
    let color = class_color(b.class);
    let pts: Vec<String> = b
        .corners()
        .iter()
        .map(|c| {
            let (u, w) = v.px(c[0], c[1]);
            format!("{u:.2},{w:.2}")
        })
        .collect();
    let dash = if kind == "gt" {
        " stroke-dasharray=\"4 2\""
    } else {
        ""
    };
    let _ = writeln!(
        s,
        "<polygon class=\"{kind}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
        pts.join(" ")
    );
    let (x0, y0) = v.px(b.cx, b.cy);
    let (x1, y1) = v.px(
        b.cx + 0.5 * b.l * b.yaw.cos(),
        b.cy + 0.5 * b.l * b.yaw.sin(),
    );
    let _ = writeln!(
        s,
        "<line class=\"arrow {kind}\" x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y1:.2}\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
    );
}

/// Points of the core scan, ground truths (dashed) and detections (solid),
/// each box with a heading stroke from its center to its front edge.
pub fn render_bev(seq: &Sequence, dets: &[RotatedBox], grid: &GridSpec) -> String {
    let v = View {
        x_max: grid.x_max,
        y_max: grid.y_max,
    };
    let width = (grid.y_max - grid.y_min) * SCALE;
    let height = (grid.x_max - grid.x_min) * SCALE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.2} {height:.2}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<g class=\"points\" fill=\"#444444\">");
    for p in &seq.core().points {
        let (x, y) = (p[0] as f64, p[1] as f64);
        if x < grid.x_min || x >= grid.x_max || y < grid.y_min || y >= grid.y_max {
            continue;
        }
        let (u, w) = v.px(x, y);
        let _ = writeln!(
            s,
            "<rect x=\"{u:.2}\" y=\"{w:.2}\" width=\"1\" height=\"1\"/>"
        );
    }
    let _ = writeln!(s, "</g>");
    for b in &seq.annotations {
        draw_box(&mut s, &v, b, "gt");
    }
    for b in dets {
        draw_box(&mut s, &v, b, "det");
    }
    let _ = writeln!(s, "</svg>");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use recpillars::dataio::Scan;
    use recpillars::geometry::Pose;

    fn one_box_sequence() -> Sequence {
        let scan = Scan {
            points: vec![[10.0, 1.0, 0.0, 0.5], [500.0, 0.0, 0.0, 0.5]],
            pose: Pose::identity(),
            timestamp: 0.0,
        };
        let b = RotatedBox::new(12.0, 2.0, -1.0, 4.0, 2.0, 1.5, 0.3, ObjectClass::Vehicle);
        Sequence::new(vec![scan], vec![b]).unwrap()
    }

    #[test]
    fn one_ground_truth() {
        let svg = render_bev(&one_box_sequence(), &[], &GridSpec::desk());
        assert_eq!(svg.matches("<polygon class=\"gt\"").count(), 1);
        assert_eq!(svg.matches("class=\"arrow").count(), 1);
        assert_eq!(svg.matches("class=\"det\"").count(), 0);
        // The out-of-grid point is not drawn.
        assert_eq!(svg.matches("<rect x=").count(), 1);
        assert!(svg.contains(class_color(ObjectClass::Vehicle)));
    }

    #[test]
    fn detections_drawn_solid() {
        let seq = one_box_sequence();
        let d = RotatedBox::new(20.0, -3.0, -1.0, 1.8, 0.7, 1.5, 0.0, ObjectClass::Cyclist)
            .with_score(0.7);
        let svg = render_bev(&seq, &[d], &GridSpec::desk());
        assert_eq!(svg.matches("<polygon class=\"det\"").count(), 1);
        assert_eq!(svg.matches("class=\"arrow").count(), 2);
        assert!(svg.contains(class_color(ObjectClass::Cyclist)));
        assert_eq!(svg, render_bev(&seq, &[d], &GridSpec::desk()));
    }
}
