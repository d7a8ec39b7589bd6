use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-6;

/// Rigid 4×4 homogeneous transform, ego-to-world, meters.
/// Serialized as 16 row-major values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Pose {
    m: [[f64; 4]; 4],
}

impl TryFrom<Vec<f64>> for Pose {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let arr: [f64; 16] = v.try_into().map_err(|v: Vec<f64>| {
            Error::InvalidArgument(format!("pose needs 16 values, got {}", v.len()))
        })?;
        Pose::from_row_major(arr)
    }
}

impl From<Pose> for Vec<f64> {
    fn from(p: Pose) -> Vec<f64> {
        p.to_row_major().to_vec()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Pose { m }
    }

    /// Rotation about z by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            m: [
                [c, -s, 0.0, t[0]],
                [s, c, 0.0, t[1]],
                [0.0, 0.0, 1.0, t[2]],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    /// Validates the rigid-transform invariants.
    pub fn from_row_major(v: [f64; 16]) -> Result<Self> {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[i * 4..i * 4 + 4]);
        }
        let p = Pose { m };
        p.validate()?;
        Ok(p)
    }

    /// Unchecked construction, for building deliberately invalid matrices.
    pub fn from_matrix_unchecked(m: [[f64; 4]; 4]) -> Self {
        Pose { m }
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            out[i * 4..i * 4 + 4].copy_from_slice(&self.m[i]);
        }
        out
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn yaw(&self) -> f64 {
        self.m[1][0].atan2(self.m[0][0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("pose has non-finite entries".into()));
        }
        let last = self.m[3];
        if last[0].abs() > ORTHO_TOL
            || last[1].abs() > ORTHO_TOL
            || last[2].abs() > ORTHO_TOL
            || (last[3] - 1.0).abs() > ORTHO_TOL
        {
            return Err(Error::InvalidArgument(format!(
                "pose last row {last:?} is not (0,0,0,1)"
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.m[k][i] * self.m[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > ORTHO_TOL {
                    return Err(Error::InvalidArgument(
                        "pose rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Inverse of a rigid transform: `[Rᵀ, −Rᵀt]`.
    pub fn inverse(&self) -> Result<Pose> {
        self.validate()?;
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = self.m[j][i];
            }
            m[i][3] = -(0..3).map(|k| self.m[k][i] * self.m[k][3]).sum::<f64>();
        }
        m[3][3] = 1.0;
        Ok(Pose { m })
    }

    /// Matrix product `self · rhs`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        Pose { m }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.m[i][0] * p[0] + self.m[i][1] * p[1] + self.m[i][2] * p[2] + self.m[i][3];
        }
        out
    }
}

/// The BEV part of a relative pose: rotation block and planar translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    pub r11: f64,
    pub r12: f64,
    pub r21: f64,
    pub r22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Transform2D {
    pub const IDENTITY: Transform2D = Transform2D {
        r11: 1.0,
        r12: 0.0,
        r21: 0.0,
        r22: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// `(r11, r12, r21, r22, tx, ty)`, the channel order used when the
    /// transform is broadcast over a feature map.
    pub fn to_array(&self) -> [f64; 6] {
        [self.r11, self.r12, self.r21, self.r22, self.tx, self.ty]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.r11 * p[0] + self.r12 * p[1] + self.tx,
            self.r21 * p[0] + self.r22 * p[1] + self.ty,
        ]
    }

    pub fn inverse(&self) -> Transform2D {
        // Rotation block is orthonormal, so its inverse is the transpose.
        Transform2D {
            r11: self.r11,
            r12: self.r21,
            r21: self.r12,
            r22: self.r22,
            tx: -(self.r11 * self.tx + self.r21 * self.ty),
            ty: -(self.r12 * self.tx + self.r22 * self.ty),
        }
    }
}

/// `pose_now⁻¹ · pose_prev`: maps previous-frame coordinates into the
/// current frame.
pub fn relative_transform(pose_now: &Pose, pose_prev: &Pose) -> Result<Pose> {
    pose_prev.validate()?;
    let inv = pose_now.inverse()?;
    if pose_now == pose_prev {
        // Exact identity rather than RᵀR rounded.
        return Ok(Pose::identity());
    }
    Ok(inv.compose(pose_prev))
}

/// Reads `r11, r12, r21, r22` and the x/y translation out of a relative pose.
pub fn extract_2d(rel: &Pose) -> Transform2D {
    let m = rel.matrix();
    Transform2D {
        r11: m[0][0],
        r12: m[0][1],
        r21: m[1][0],
        r22: m[1][1],
        tx: m[0][3],
        ty: m[1][3],
    }
}

pub fn transform_points(points: &[[f64; 3]], rel: &Pose) -> Vec<[f64; 3]> {
    points.iter().map(|&p| rel.apply(p)).collect()
}

/// Transforms `x, y, z` of `x, y, z, intensity` rows in place (computed in f64).
pub fn transform_scan_points(points: &mut [[f32; 4]], rel: &Pose) {
    for p in points {
        let q = rel.apply([p[0] as f64, p[1] as f64, p[2] as f64]);
        p[0] = q[0] as f32;
        p[1] = q[1] as f32;
        p[2] = q[2] as f32;
    }
}
