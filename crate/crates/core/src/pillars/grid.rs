use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridMeta;

/// BEV discretization of the encoder. Row `i` indexes x, column `j` indexes y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
    /// Downsampling between the encoder grid and the head grid.
    pub output_stride: usize,
}

impl Default for GridSpec {
    /// Full scale: 120 m ahead, ±40 m sideways at 0.2 m (600×400 cells).
    fn default() -> Self {
        GridSpec {
            x_min: 0.0,
            x_max: 120.0,
            y_min: -40.0,
            y_max: 40.0,
            cell: 0.2,
            output_stride: 2,
        }
    }
}

impl GridSpec {
    /// Small grid used throughout the tests: 96×64 cells at 0.5 m.
    pub fn desk() -> Self {
        GridSpec {
            x_min: 0.0,
            x_max: 48.0,
            y_min: -16.0,
            y_max: 16.0,
            cell: 0.5,
            output_stride: 2,
        }
    }

    fn extent(lo: f64, hi: f64, cell: f64, axis: &str) -> Result<usize> {
        let n = (hi - lo) / cell;
        if !(n >= 1.0) || (n - n.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "grid {axis} range [{lo}, {hi}) is not a positive whole number of {cell} m cells"
            )));
        }
        Ok(n.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || self.output_stride == 0 {
            return Err(Error::Config(
                "grid cell and output_stride must be positive".into(),
            ));
        }
        let l = Self::extent(self.x_min, self.x_max, self.cell, "x")?;
        let w = Self::extent(self.y_min, self.y_max, self.cell, "y")?;
        if l % self.output_stride != 0 || w % self.output_stride != 0 {
            return Err(Error::Config(format!(
                "grid {l}×{w} is not divisible by output stride {}",
                self.output_stride
            )));
        }
        Ok(())
    }

    /// Cells along x (`L`).
    pub fn rows(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell).round() as usize
    }

    /// Cells along y (`W`).
    pub fn cols(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell).round() as usize
    }

    pub fn out_rows(&self) -> usize {
        self.rows() / self.output_stride
    }

    pub fn out_cols(&self) -> usize {
        self.cols() / self.output_stride
    }

    pub fn out_cell(&self) -> f64 {
        self.cell * self.output_stride as f64
    }

    /// Encoder cell containing `(x, y)`, if inside `[x_min, x_max) × [y_min, y_max)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let i = (((x - self.x_min) / self.cell).floor() as usize).min(self.rows() - 1);
        let j = (((y - self.y_min) / self.cell).floor() as usize).min(self.cols() - 1);
        Some((i, j))
    }

    /// Head-grid cell containing `(x, y)`.
    pub fn out_cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let c = self.out_cell();
        let i = (((x - self.x_min) / c).floor() as usize).min(self.out_rows() - 1);
        let j = (((y - self.y_min) / c).floor() as usize).min(self.out_cols() - 1);
        Some((i, j))
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta {
            x_min: self.x_min,
            y_min: self.y_min,
            cell: self.cell,
            rows: self.rows(),
            cols: self.cols(),
        }
    }

    pub fn out_meta(&self) -> GridMeta {
        GridMeta {
            x_min: self.x_min,
            y_min: self.y_min,
            cell: self.out_cell(),
            rows: self.out_rows(),
            cols: self.out_cols(),
        }
    }
}
