use super::GridSpec;
use crate::numerics::{Real, Tensor};

/// Channels per decorated point: `x, y, z, intensity`, offsets to the
/// pillar's point mean `xc, yc, zc`, and offsets to the pillar center `xp, yp`.
pub const DECORATION_WIDTH: usize = 9;

/// Points that landed in the grid, decorated, with their pillar index.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillars {
    pub decorated: Vec<[f64; DECORATION_WIDTH]>,
    /// `row · W + col` of each kept point.
    pub cell_index: Vec<u32>,
    /// Points outside the grid's x/y window.
    pub dropped: usize,
}

impl Pillars {
    pub fn len(&self) -> usize {
        self.decorated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decorated.is_empty()
    }

    /// Decorated points as a `[1, 1, N', D]` tensor.
    pub fn features<T: Real>(&self) -> Tensor<T> {
        let data = self.decorated.iter().flatten().map(|&v| T::of(v)).collect();
        Tensor::from_vec(&[1, 1, self.len(), DECORATION_WIDTH], data).expect("consistent shape")
    }

    /// Distinct occupied pillars.
    pub fn occupied(&self) -> usize {
        let mut cells = self.cell_index.clone();
        cells.sort_unstable();
        cells.dedup();
        cells.len()
    }
}

/// Dynamic voxelization: every in-grid point is kept (no per-pillar cap or
/// padding), assigned to its pillar, and decorated.
pub fn pillarize(points: &[[f32; 4]], grid: &GridSpec) -> Pillars {
    let w = grid.cols();
    let cells = grid.rows() * w;
    let mut kept = Vec::with_capacity(points.len());
    let mut cell_index = Vec::with_capacity(points.len());
    for p in points {
        let (x, y) = (p[0] as f64, p[1] as f64);
        if let Some((i, j)) = grid.cell_of(x, y) {
            kept.push(p);
            cell_index.push((i * w + j) as u32);
        }
    }
    let dropped = points.len() - kept.len();

    let mut sums = vec![[0.0f64; 3]; cells];
    let mut counts = vec![0u32; cells];
    for (p, &c) in kept.iter().zip(&cell_index) {
        let s = &mut sums[c as usize];
        s[0] += p[0] as f64;
        s[1] += p[1] as f64;
        s[2] += p[2] as f64;
        counts[c as usize] += 1;
    }

    let decorated = kept
        .iter()
        .zip(&cell_index)
        .map(|(p, &c)| {
            let c = c as usize;
            let n = counts[c] as f64;
            let mean = sums[c].map(|s| s / n);
            let (i, j) = (c / w, c % w);
            let px = grid.x_min + (i as f64 + 0.5) * grid.cell;
            let py = grid.y_min + (j as f64 + 0.5) * grid.cell;
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            [
                x,
                y,
                z,
                p[3] as f64,
                x - mean[0],
                y - mean[1],
                z - mean[2],
                x - px,
                y - py,
            ]
        })
        .collect();
    Pillars {
        decorated,
        cell_index,
        dropped,
    }
}
