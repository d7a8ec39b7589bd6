use crate::geometry::RotatedBox;
use crate::pillars::GridSpec;

/// Regression channels per cell: Δx, Δy, z, l, w, h, sin θ, cos θ.
pub const REG_WIDTH: usize = 8;

/// Per-cell training targets on the head grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub rows: usize,
    pub cols: usize,
    /// Head channel of each cell: 0 background, 1..=3 the detected classes.
    pub class: Vec<u8>,
    /// Meaningful only where `foreground` is set (zero elsewhere).
    pub reg: Vec<[f64; REG_WIDTH]>,
    pub foreground: Vec<bool>,
    /// Cells excluded from every loss.
    pub unclear: Vec<bool>,
    /// Boxes whose center fell outside the grid.
    pub ignored: usize,
}

impl TargetMaps {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Cells that take part in the classification loss.
    pub fn valid_cells(&self) -> usize {
        self.unclear.iter().filter(|&&u| !u).count()
    }

    pub fn foreground_cells(&self) -> usize {
        self.foreground.iter().filter(|&&f| f).count()
    }

    /// Cell counts per head channel over valid cells.
    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for (k, &u) in self.class.iter().zip(&self.unclear) {
            if !u {
                c[*k as usize] += 1;
            }
        }
        c
    }
}

/// Assigns each box to the head cell containing its BEV center. When two
/// boxes share a cell the one nearer the ego wins; an unclear winner marks
/// the cell unclear instead of foreground.
pub fn build_targets(annotations: &[RotatedBox], grid: &GridSpec) -> TargetMaps {
    let (rows, cols) = (grid.out_rows(), grid.out_cols());
    let n = rows * cols;
    let mut winner: Vec<Option<usize>> = vec![None; n];
    let mut ignored = 0;
    for (k, b) in annotations.iter().enumerate() {
        let Some((i, j)) = grid.out_cell_of(b.cx, b.cy) else {
            ignored += 1;
            continue;
        };
        let slot = &mut winner[i * cols + j];
        match *slot {
            Some(prev) if annotations[prev].range() <= b.range() => {}
            _ => *slot = Some(k),
        }
    }
    let mut t = TargetMaps {
        rows,
        cols,
        class: vec![0; n],
        reg: vec![[0.0; REG_WIDTH]; n],
        foreground: vec![false; n],
        unclear: vec![false; n],
        ignored,
    };
    let cell = grid.out_cell();
    for (c, w) in winner.iter().enumerate() {
        let Some(k) = *w else { continue };
        let b = &annotations[k];
        match b.class.channel() {
            None => t.unclear[c] = true,
            Some(ch) => {
                let (i, j) = (c / cols, c % cols);
                let px = grid.x_min + (i as f64 + 0.5) * cell;
                let py = grid.y_min + (j as f64 + 0.5) * cell;
                t.class[c] = ch as u8;
                t.foreground[c] = true;
                t.reg[c] = [
                    b.cx - px,
                    b.cy - py,
                    b.cz,
                    b.l,
                    b.w,
                    b.h,
                    b.yaw.sin(),
                    b.yaw.cos(),
                ];
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ObjectClass;

    fn vehicle(cx: f64, cy: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, -1.0, 4.0, 2.0, 1.5, 0.4, ObjectClass::Vehicle)
    }

    #[test]
    fn center_on_cell_center() {
        let g = GridSpec::desk();
        // Head cells are 1 m; cell (3, 20) is centered at (3.5, 4.5).
        let t = build_targets(&[vehicle(3.5, 4.5)], &g);
        let c = 3 * g.out_cols() + 20;
        assert!(t.foreground[c]);
        assert_eq!(t.class[c], 1);
        assert_eq!(t.reg[c][0], 0.0);
        assert_eq!(t.reg[c][1], 0.0);
        assert_eq!(t.foreground_cells(), 1);
    }

    #[test]
    fn empty_is_background() {
        let t = build_targets(&[], &GridSpec::desk());
        assert!(t.class.iter().all(|&c| c == 0));
        assert_eq!(t.foreground_cells(), 0);
        assert_eq!(t.valid_cells(), t.cells());
    }

    #[test]
    fn nearer_box_wins_and_outside_counted() {
        let g = GridSpec::desk();
        let far = vehicle(10.9, 0.9);
        let mut near = vehicle(10.1, 0.1);
        near.class = ObjectClass::Pedestrian;
        let t = build_targets(&[far, near, vehicle(100.0, 0.0)], &g);
        assert_eq!(t.ignored, 1);
        assert_eq!(t.foreground_cells(), 1);
        assert_eq!(t.class_counts()[3], 1);
    }

    #[test]
    fn unclear_masks_cell() {
        let g = GridSpec::desk();
        let mut u = vehicle(5.5, 0.5);
        u.class = ObjectClass::Unclear;
        let t = build_targets(&[u], &g);
        assert_eq!(t.foreground_cells(), 0);
        assert_eq!(t.valid_cells(), t.cells() - 1);
        assert!(t
            .foreground
            .iter()
            .zip(&t.unclear)
            .all(|(f, u)| !(*f && *u)));
    }
}
