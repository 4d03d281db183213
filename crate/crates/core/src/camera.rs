//! Pinhole camera with OpenCV axes (x right, y down, z forward).
//!
//! Pixel centers sit at integer coordinates, so a principal point of
//! `(W/2, H/2)` lands on pixel `(W/2, H/2)`.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Mat3, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraView {
    intrinsics: Mat3,
    extrinsics: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    /// `intrinsics` is `K`, `extrinsics` the world-to-camera transform `E`.
    pub fn new(intrinsics: Mat3, extrinsics: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(invalid("intrinsics must be upper triangular with positive focal lengths"));
        }
        if (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(invalid("intrinsics must have K[2][2] = 1"));
        }
        let r: Mat3 = extrinsics.fixed_view::<3, 3>(0, 0).into();
        if (r.transpose() * r - Mat3::identity()).amax() > 1e-9 {
            return Err(invalid("extrinsic rotation block is not orthonormal"));
        }
        let bottom = extrinsics.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(invalid("extrinsics bottom row must be (0, 0, 0, 1)"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("camera image size must be nonzero"));
        }
        if intrinsics.iter().chain(extrinsics.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("camera parameters must be finite"));
        }
        Ok(CameraView { intrinsics, extrinsics, width, height })
    }

    pub fn from_pose(intrinsics: Mat3, rotation: Mat3, translation: Vec3, width: usize, height: usize) -> Result<Self> {
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        CameraView::new(intrinsics, e, width, height)
    }

    /// Intrinsics for square pixels and a vertical field of view in degrees.
    pub fn intrinsics_from_fov(fov_deg: f64, width: usize, height: usize) -> Result<Mat3> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(invalid(format!("field of view {fov_deg} must lie in (0, 180) degrees")));
        }
        let f = 0.5 * height as f64 / (0.5 * fov_deg.to_radians()).tan();
        Ok(Mat3::new(f, 0.0, 0.5 * width as f64, 0.0, f, 0.5 * height as f64, 0.0, 0.0, 1.0))
    }

    /// Camera at `eye` looking at `target`, with `up` the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Mat3, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| invalid("eye and target coincide"))?;
        let right = forward.cross(&up).try_normalize(1e-12).ok_or_else(|| invalid("up is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        CameraView::from_pose(intrinsics, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> &Mat3 {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    /// World-to-camera rotation.
    pub fn rotation(&self) -> Mat3 {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vec3 {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation().row(2).transpose()
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }
    pub fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    intrinsics: [[f64; 3]; 3],
    extrinsics: [[f64; 4]; 4],
    width: usize,
    height: usize,
}

impl TryFrom<CameraRecord> for CameraView {
    type Error = crate::error::Error;
    fn try_from(r: CameraRecord) -> Result<Self> {
        let k = Mat3::from_fn(|i, j| r.intrinsics[i][j]);
        let e = Matrix4::from_fn(|i, j| r.extrinsics[i][j]);
        CameraView::new(k, e, r.width, r.height)
    }
}

impl From<CameraView> for CameraRecord {
    fn from(c: CameraView) -> Self {
        let mut intrinsics = [[0.0; 3]; 3];
        let mut extrinsics = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                intrinsics[i][j] = c.intrinsics[(i, j)];
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                extrinsics[i][j] = c.extrinsics[(i, j)];
            }
        }
        CameraRecord { intrinsics, extrinsics, width: c.width, height: c.height }
    }
}
