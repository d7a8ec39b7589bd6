use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Marks a point that belongs to no grid cell.
pub const INVALID_CELL: u32 = u32::MAX;

/// Winning point per output element, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterArgmax {
    points: usize,
    channels: usize,
    /// `L·W·C` entries; [`INVALID_CELL`] where the cell received no point.
    winner: Vec<u32>,
}

impl ScatterArgmax {
    pub fn winner(&self, flat: usize) -> Option<usize> {
        let w = self.winner[flat];
        (w != INVALID_CELL).then_some(w as usize)
    }
}

/// Per-cell, per-channel maximum of point features into an `1×L×W×C` grid.
///
/// `features` holds `N` rows of `C` values (any shape whose last axis is `C`);
/// `cell_index[i]` is `row·W + col` or [`INVALID_CELL`]. Empty cells are 0.
/// On exact ties the lowest point index wins.
pub fn scatter_max<T: Real>(
    features: &Tensor<T>,
    cell_index: &[u32],
    l: usize,
    w: usize,
) -> Result<(Tensor<T>, ScatterArgmax)> {
    let c = features.channels();
    let n = features.len() / c.max(1);
    if cell_index.len() != n {
        return Err(Error::shape(
            "scatter_max",
            format!("{} cell indices for {n} points", cell_index.len()),
        ));
    }
    let cells = l * w;
    let mut out = Tensor::zeros(&[1, l, w, c]);
    let mut winner = vec![INVALID_CELL; cells * c];
    let data = out.data_mut();
    for (i, (&cell, row)) in cell_index
        .iter()
        .zip(features.data().chunks_exact(c))
        .enumerate()
    {
        if cell == INVALID_CELL {
            continue;
        }
        let cell = cell as usize;
        if cell >= cells {
            return Err(Error::InvalidArgument(format!(
                "scatter_max: point {i} has cell index {cell} outside the {l}×{w} grid"
            )));
        }
        let base = cell * c;
        for j in 0..c {
            let slot = base + j;
            if winner[slot] == INVALID_CELL || row[j] > data[slot] {
                data[slot] = row[j];
                winner[slot] = i as u32;
            }
        }
    }
    Ok((
        out,
        ScatterArgmax {
            points: n,
            channels: c,
            winner,
        },
    ))
}

/// Routes each output gradient to its argmax point. Returns an `N×C` tensor
/// shaped like the original features when `like` is given.
pub fn scatter_max_backward<T: Real>(
    argmax: &ScatterArgmax,
    dout: &Tensor<T>,
    like: &[usize],
) -> Result<Tensor<T>> {
    if dout.len() != argmax.winner.len() {
        return Err(Error::shape(
            "scatter_max_backward",
            format!(
                "gradient has {} elements, grid has {}",
                dout.len(),
                argmax.winner.len()
            ),
        ));
    }
    let c = argmax.channels;
    let mut dx = Tensor::zeros(&[argmax.points, c]);
    let g = dx.data_mut();
    for (slot, (&win, &d)) in argmax.winner.iter().zip(dout.data()).enumerate() {
        if win != INVALID_CELL {
            g[win as usize * c + slot % c] += d;
        }
    }
    dx.reshape(like)
}
