use serde::{Deserialize, Serialize};

use super::pose::Transform2D;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Placement of a BEV feature map: row `i` runs along x, column `j` along y,
/// and cell `(i, j)` is centered at `(x_min + (i + ½)·cell, y_min + (j + ½)·cell)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub x_min: f64,
    pub y_min: f64,
    pub cell: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridMeta {
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.x_min + (i as f64 + 0.5) * self.cell,
            self.y_min + (j as f64 + 0.5) * self.cell,
        ]
    }

    /// The same extent sampled `stride` times coarser.
    pub fn downsample(&self, stride: usize) -> GridMeta {
        GridMeta {
            x_min: self.x_min,
            y_min: self.y_min,
            cell: self.cell * stride as f64,
            rows: self.rows.div_ceil(stride),
            cols: self.cols.div_ceil(stride),
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h != self.rows || w != self.cols || !(self.cell > 0.0) {
            return Err(Error::shape(
                "warp_feature_map",
                format!(
                    "feature map {h}×{w} vs grid {}×{} (cell {})",
                    self.rows, self.cols, self.cell
                ),
            ));
        }
        Ok(())
    }
}

const SNAP: f64 = 1e-9;

/// One output cell's bilinear taps: flat source cell and weight.
fn taps(rel: &Transform2D, grid: &GridMeta, i: usize, j: usize) -> [(Option<usize>, f64); 4] {
    let [px, py] = grid.cell_center(i, j);
    // Source position in the previous frame is R^T (p - t); work with the
    // offset from p so the identity and lattice shifts stay exact.
    let dx = (rel.r11 - 1.0) * px + rel.r21 * py - rel.r11 * rel.tx - rel.r21 * rel.ty;
    let dy = rel.r12 * px + (rel.r22 - 1.0) * py - rel.r12 * rel.tx - rel.r22 * rel.ty;
    let snap = |v: f64| {
        if (v - v.round()).abs() < SNAP {
            v.round()
        } else {
            v
        }
    };
    let u = snap(i as f64 + dx / grid.cell);
    let v = snap(j as f64 + dy / grid.cell);
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let at = |a: f64, b: f64| -> Option<usize> {
        if a < 0.0 || b < 0.0 || a >= grid.rows as f64 || b >= grid.cols as f64 {
            None
        } else {
            Some(a as usize * grid.cols + b as usize)
        }
    };
    [
        (at(u0, v0), (1.0 - fu) * (1.0 - fv)),
        (at(u0 + 1.0, v0), fu * (1.0 - fv)),
        (at(u0, v0 + 1.0), (1.0 - fu) * fv),
        (at(u0 + 1.0, v0 + 1.0), fu * fv),
    ]
}

/// Resamples a `[1, H, W, C]` map from the previous frame into the current
/// one: each output cell bilinearly reads the previous map at `rel⁻¹(p)`,
/// with samples outside the grid reading 0. `rel` maps previous-frame
/// coordinates to current-frame coordinates.
pub fn warp_feature_map<T: Real>(
    features: &Tensor<T>,
    rel: &Transform2D,
    grid: &GridMeta,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = features.dims4("warp_feature_map")?;
    if n != 1 {
        return Err(Error::shape(
            "warp_feature_map",
            format!("batch must be 1, got {n}"),
        ));
    }
    grid.check(h, w)?;
    if *rel == Transform2D::IDENTITY {
        return Ok(Tensor::from_vec(
            features.shape(),
            features.data().to_vec(),
        )?);
    }
    let src = features.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..h {
        for j in 0..w {
            let o = (i * w + j) * c;
            for (cell, wt) in taps(rel, grid, i, j) {
                let Some(s) = cell else { continue };
                if wt == 0.0 {
                    continue;
                }
                let wt = T::of(wt);
                for (dst, &x) in out[o..o + c].iter_mut().zip(&src[s * c..s * c + c]) {
                    *dst += wt * x;
                }
            }
        }
    }
    Tensor::from_vec(features.shape(), out)
}

/// Adjoint of [`warp_feature_map`]: routes output gradients back to the
/// source cells with the same bilinear weights.
pub fn warp_feature_map_backward<T: Real>(
    dout: &Tensor<T>,
    rel: &Transform2D,
    grid: &GridMeta,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = dout.dims4("warp_feature_map_backward")?;
    if n != 1 {
        return Err(Error::shape(
            "warp_feature_map_backward",
            format!("batch must be 1, got {n}"),
        ));
    }
    grid.check(h, w)?;
    if *rel == Transform2D::IDENTITY {
        return Ok(Tensor::from_vec(dout.shape(), dout.data().to_vec())?);
    }
    let g = dout.data();
    let mut dx = vec![T::zero(); g.len()];
    for i in 0..h {
        for j in 0..w {
            let o = (i * w + j) * c;
            for (cell, wt) in taps(rel, grid, i, j) {
                let Some(s) = cell else { continue };
                if wt == 0.0 {
                    continue;
                }
                let wt = T::of(wt);
                for (dst, &x) in dx[s * c..s * c + c].iter_mut().zip(&g[o..o + c]) {
                    *dst += wt * x;
                }
            }
        }
    }
    Tensor::from_vec(dout.shape(), dx)
}
