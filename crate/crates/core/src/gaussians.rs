//! Canonical Gaussian cloud and the 3D → 2D projection used by the rasterizer.

use crate::camera::CameraView;
use crate::error::{shape, Error, Result};
use crate::numerics::{quat_to_rotation, quat_to_rotation_backward, sigmoid, Mat2, Mat3, Quat, Vec2, Vec3};

/// Camera-space depth at or below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Added to the diagonal of every projected covariance, in pixel².
pub const LOW_PASS_FLOOR: f64 = 0.3;

/// Structure-of-arrays Gaussian set. Scales are stored as log standard
/// deviations and opacities as logits so every field is unconstrained.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// One Gaussian in parameter form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        GaussianCloud {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.colors.push(g.color);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            color: self.colors[i],
        }
    }

    pub fn position(&self, i: usize) -> Vec3 {
        Vec3::from(self.positions[i])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Keeps the Gaussians for which `keep` is true, preserving order.
    pub fn retain_mask(&self, keep: &[bool]) -> GaussianCloud {
        let mut out = GaussianCloud::with_capacity(keep.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.push(self.get(i));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n || self.log_scales.len() != n || self.opacity_logits.len() != n || self.colors.len() != n {
            return Err(shape(format!(
                "cloud fields disagree on length: {} positions, {} rotations, {} scales, {} opacities, {} colors",
                n,
                self.rotations.len(),
                self.log_scales.len(),
                self.opacity_logits.len(),
                self.colors.len()
            )));
        }
        for i in 0..n {
            let bad = |field| Err(Error::NonFiniteGaussian { index: i, field });
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return bad("position");
            }
            if !self.rotations[i].iter().all(|v| v.is_finite()) || self.rotations[i].iter().all(|&v| v == 0.0) {
                return bad("rotation");
            }
            if !self.log_scales[i].iter().all(|v| v.is_finite()) {
                return bad("log_scale");
            }
            if !self.opacity_logits[i].is_finite() {
                return bad("opacity_logit");
            }
            if !self.colors[i].iter().all(|v| v.is_finite()) {
                return bad("color");
            }
        }
        Ok(())
    }

    /// Flat views of every parameter group, in a fixed order.
    pub fn groups_mut(&mut self) -> [(&'static str, &mut [f64]); 5] {
        [
            ("positions", self.positions.as_flattened_mut()),
            ("rotations", self.rotations.as_flattened_mut()),
            ("log_scales", self.log_scales.as_flattened_mut()),
            ("opacity_logits", self.opacity_logits.as_mut_slice()),
            ("colors", self.colors.as_flattened_mut()),
        ]
    }

    pub fn groups(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("positions", self.positions.as_flattened()),
            ("rotations", self.rotations.as_flattened()),
            ("log_scales", self.log_scales.as_flattened()),
            ("opacity_logits", self.opacity_logits.as_slice()),
            ("colors", self.colors.as_flattened()),
        ]
    }

    /// A zero-filled cloud of the same length; used as a gradient buffer.
    pub fn zeros_like(&self) -> GaussianCloud {
        let n = self.len();
        GaussianCloud {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }

    pub fn add_assign(&mut self, other: &GaussianCloud) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Σ = R · diag(exp(2·log_scale)) · Rᵀ.
pub fn build_covariance(rotation: Quat, log_scale: Vec3) -> Result<Mat3> {
    if !rotation.is_finite() || !log_scale.iter().all(|v| v.is_finite()) {
        return Err(crate::error::invalid("covariance inputs must be finite"));
    }
    let r = quat_to_rotation(rotation)?;
    let d = Mat3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    Ok(r * d * r.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vec2,
    /// Screen-space covariance after the low-pass floor.
    pub cov2d: Mat2,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Intermediate values kept for [`project_backward`].
#[derive(Clone, Debug)]
pub struct ProjectionCache {
    p_cam: Vec3,
    jacobian: nalgebra::Matrix2x3<f64>,
    rotation: Mat3,
    variances: Vec3,
    view_rotation: Mat3,
}

/// Perspective projection of one Gaussian. Returns `None` when the mean is at
/// or behind the near plane.
pub fn project(g: &Gaussian, camera: &CameraView) -> Result<Option<(ProjectedGaussian, ProjectionCache)>> {
    let w = camera.rotation();
    let p_cam = w * Vec3::from(g.position) + camera.translation();
    if p_cam.z <= NEAR_PLANE {
        return Ok(None);
    }
    let (fx, fy) = (camera.fx(), camera.fy());
    let z = p_cam.z;
    let mean2d = Vec2::new(
        fx * p_cam.x / z + camera.skew() * p_cam.y / z + camera.cx(),
        fy * p_cam.y / z + camera.cy(),
    );
    let jacobian = jacobian_at(camera, &p_cam);
    let rotation = quat_to_rotation(Quat::from_array(g.rotation))?;
    let variances = Vec3::from(g.log_scale).map(|s| (2.0 * s).exp());
    let sigma = rotation * Mat3::from_diagonal(&variances) * rotation.transpose();
    let t = jacobian * w;
    let mut cov2d: Mat2 = t * sigma * t.transpose();
    cov2d[(0, 0)] += LOW_PASS_FLOOR;
    cov2d[(1, 1)] += LOW_PASS_FLOOR;
    // Enforce exact symmetry; the product above can differ in the last bit.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    Ok(Some((
        ProjectedGaussian { mean2d, cov2d, depth: z, opacity: sigmoid(g.opacity_logit), color: g.color },
        ProjectionCache { p_cam, jacobian, rotation, variances, view_rotation: w },
    )))
}

fn jacobian_at(camera: &CameraView, p: &Vec3) -> nalgebra::Matrix2x3<f64> {
    let (fx, fy, s) = (camera.fx(), camera.fy(), camera.skew());
    let (x, y, z) = (p.x, p.y, p.z);
    let z2 = z * z;
    nalgebra::Matrix2x3::new(fx / z, s / z, -(fx * x + s * y) / z2, 0.0, fy / z, -fy * y / z2)
}

/// Parameter gradients produced by [`project_backward`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionGrads {
    pub d_position: [f64; 3],
    pub d_rotation: [f64; 4],
    pub d_log_scale: [f64; 3],
}

/// Back-propagates gradients w.r.t. `mean2d` and the (symmetric, full-form)
/// `cov2d` to the Gaussian's position, raw quaternion and log-scales.
pub fn project_backward(
    g: &Gaussian,
    camera: &CameraView,
    cache: &ProjectionCache,
    d_mean2d: Vec2,
    d_cov2d: &Mat2,
) -> Result<ProjectionGrads> {
    let (fx, fy, s) = (camera.fx(), camera.fy(), camera.skew());
    let p = cache.p_cam;
    let (x, y, z) = (p.x, p.y, p.z);
    let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));

    // mean2d = (fx x/z + s y/z + cx, fy y/z + cy)
    let mut d_pcam = Vec3::new(
        d_mean2d.x * fx * iz,
        d_mean2d.x * s * iz + d_mean2d.y * fy * iz,
        -d_mean2d.x * (fx * x + s * y) * iz2 - d_mean2d.y * fy * y * iz2,
    );

    let w = cache.view_rotation;
    let r = cache.rotation;
    let d = Mat3::from_diagonal(&cache.variances);
    let sigma = r * d * r.transpose();
    let m = w * sigma * w.transpose();
    let j = cache.jacobian;

    // cov2d = J M Jᵀ (+ floor); with G symmetric, dJ = 2 G J M and dM = Jᵀ G J.
    let g2 = 0.5 * (d_cov2d + d_cov2d.transpose());
    let d_j = 2.0 * g2 * j * m;
    let d_m = j.transpose() * g2 * j;

    // J = [[fx/z, s/z, -(fx x + s y)/z²], [0, fy/z, -fy y/z²]]
    d_pcam.x += d_j[(0, 2)] * (-fx * iz2);
    d_pcam.y += d_j[(0, 2)] * (-s * iz2) + d_j[(1, 2)] * (-fy * iz2);
    d_pcam.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 1)] * (-s * iz2)
        + d_j[(0, 2)] * (2.0 * (fx * x + s * y) * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * y * iz3);

    let d_position = w.transpose() * d_pcam;

    let d_sigma = w.transpose() * d_m * w;
    let d_r = 2.0 * d_sigma * r * d;
    let inner = r.transpose() * d_sigma * r;
    let d_log_scale = [
        2.0 * cache.variances.x * inner[(0, 0)],
        2.0 * cache.variances.y * inner[(1, 1)],
        2.0 * cache.variances.z * inner[(2, 2)],
    ];
    let d_rotation = quat_to_rotation_backward(Quat::from_array(g.rotation), &d_r)?;
    Ok(ProjectionGrads { d_position: d_position.into(), d_rotation, d_log_scale })
}

/// Inverse of a symmetric 2×2 matrix as `(a, b, c)` for `[[a, b], [b, c]]`.
pub fn conic(cov: &Mat2) -> [f64; 3] {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    let inv = 1.0 / det;
    [cov[(1, 1)] * inv, -cov[(0, 1)] * inv, cov[(0, 0)] * inv]
}

/// Gradient w.r.t. the covariance given gradients w.r.t. the conic entries
/// `(a, b, c)`, where `b` is the shared off-diagonal value.
pub fn conic_backward(cov: &Mat2, d_conic: [f64; 3]) -> Mat2 {
    let [a, b, c] = conic(cov);
    let q = Mat2::new(a, b, b, c);
    let gq = Mat2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    -(q * gq * q)
}

pub use crate::ply::{read_ply, read_ply_bytes, write_ply, write_ply_bytes, PlyPrecision};
