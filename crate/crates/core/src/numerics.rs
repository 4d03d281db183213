//! Small dense math kit used by the splatting and deformation code.
//!
//! Vectors and matrices are `nalgebra` fixed-size types. Quaternions are a
//! local `(w, x, y, z)` type because the optimizer works on raw, unnormalized
//! quaternion parameters and needs the gradient of the normalization.
//!
//! The differentiable pieces (affine layer, tanh, trilinear grid sampling) are
//! written out by hand, forward and backward, in double precision.

use crate::error::{invalid, shape, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
pub type Vec2 = nalgebra::Vector2<f64>;

/// Quaternion stored as `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalize(self) -> Result<Quat> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(invalid(format!("cannot normalize quaternion with norm {n}")));
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, rhs: Quat) -> Quat {
        let (a, b) = (self, rhs);
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn add(self, rhs: Quat) -> Quat {
        Quat::new(self.w + rhs.w, self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

/// Rotation matrix of the normalized quaternion.
pub fn quat_to_rotation(q: Quat) -> Result<Mat3> {
    Ok(unit_quat_to_rotation(q.normalize()?))
}

pub(crate) fn unit_quat_to_rotation(q: Quat) -> Mat3 {
    let Quat { w, x, y, z } = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a scalar w.r.t. the *raw* quaternion `q`, given the gradient
/// `d_rot` w.r.t. `quat_to_rotation(q)`. Includes the normalization Jacobian.
pub fn quat_to_rotation_backward(q: Quat, d_rot: &Mat3) -> Result<[f64; 4]> {
    let n = q.norm();
    let u = q.normalize()?;
    let g = |r: usize, c: usize| d_rot[(r, c)];
    let Quat { w, x, y, z } = u;
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    Ok(normalize_backward(u, n, [dw, dx, dy, dz]))
}

/// Pulls a gradient w.r.t. `u = q / |q|` back to `q`: `(I - u uᵀ) d_u / |q|`.
pub fn normalize_backward(u: Quat, norm: f64, d_u: [f64; 4]) -> [f64; 4] {
    let ua = u.to_array();
    let dot: f64 = ua.iter().zip(d_u.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (d_u[i] - ua[i] * dot) / norm;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fully connected layer `y = W x + b` with row-major `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Input retained by [`Affine::forward_tape`] for the backward pass.
#[derive(Clone, Debug)]
pub struct AffineTape {
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrads {
    pub d_weights: Vec<f64>,
    pub d_biases: Vec<f64>,
    pub d_input: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Affine { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], biases: vec![0.0; out_dim] }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != in_dim * out_dim || biases.len() != out_dim {
            return Err(shape(format!(
                "affine {out_dim}x{in_dim} given {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(Affine { in_dim, out_dim, weights, biases })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(invalid(format!("affine expects input of length {}, got {}", self.in_dim, x.len())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut y = self.biases.clone();
        self.forward_into(x, &mut y);
        Ok(y)
    }

    /// `y += W x`; caller has already placed the biases in `y`.
    pub(crate) fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        for (row, out) in self.weights.chunks_exact(self.in_dim).zip(y.iter_mut()) {
            *out += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<(Vec<f64>, AffineTape)> {
        let y = self.forward(x)?;
        Ok((y, AffineTape { input: x.to_vec() }))
    }

    /// Accumulates `dW += upstream ⊗ x`, `db += upstream` and `dx += Wᵀ upstream`.
    pub(crate) fn backward_accumulate(
        &self,
        input: &[f64],
        upstream: &[f64],
        d_weights: &mut [f64],
        d_biases: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        for (o, &g) in upstream.iter().enumerate() {
            d_biases[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &mut d_weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (dw, &xi) in row.iter_mut().zip(input) {
                *dw += g * xi;
            }
        }
        if let Some(d_input) = d_input {
            for (o, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                for (dx, &w) in d_input.iter_mut().zip(row) {
                    *dx += g * w;
                }
            }
        }
    }
}

impl AffineTape {
    pub fn backward(&self, layer: &Affine, upstream: &[f64]) -> Result<AffineGrads> {
        if upstream.len() != layer.out_dim || self.input.len() != layer.in_dim {
            return Err(invalid(format!(
                "affine backward expects upstream of length {}, got {}",
                layer.out_dim,
                upstream.len()
            )));
        }
        let mut grads = AffineGrads {
            d_weights: vec![0.0; layer.weights.len()],
            d_biases: vec![0.0; layer.out_dim],
            d_input: vec![0.0; layer.in_dim],
        };
        layer.backward_accumulate(
            &self.input,
            upstream,
            &mut grads.d_weights,
            &mut grads.d_biases,
            Some(&mut grads.d_input),
        );
        Ok(grads)
    }
}

pub fn tanh_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Backward of tanh expressed through its output `y`.
pub fn tanh_backward(y: &[f64], upstream: &[f64]) -> Vec<f64> {
    y.iter().zip(upstream).map(|(y, g)| g * (1.0 - y * y)).collect()
}

/// Dense 3D grid of feature vectors, laid out `[x][y][z][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Result of a trilinear lookup; keeps what the backward pass needs.
#[derive(Clone, Debug)]
pub struct GridSample {
    pub features: Vec<f64>,
    pub corners: [usize; 8],
    pub weights: [f64; 8],
    frac: [f64; 3],
    clamped: [bool; 3],
}

impl FeatureGrid {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Result<Self> {
        if dims.contains(&0) || channels == 0 {
            return Err(invalid(format!("feature grid dims {dims:?} x {channels} must be nonzero")));
        }
        Ok(FeatureGrid { dims, channels, data: vec![0.0; dims[0] * dims[1] * dims[2] * channels] })
    }

    pub fn from_data(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        let mut g = FeatureGrid::zeros(dims, channels)?;
        if data.len() != g.data.len() {
            return Err(shape(format!("grid {dims:?}x{channels} needs {} values, got {}", g.data.len(), data.len())));
        }
        g.data = data;
        Ok(g)
    }

    pub fn cell_offset(&self, i: usize, j: usize, k: usize) -> usize {
        ((i * self.dims[1] + j) * self.dims[2] + k) * self.channels
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let o = self.cell_offset(i, j, k);
        &self.data[o..o + self.channels]
    }

    /// Trilinear interpolation at `p` in grid coordinates (cell `i` sits at
    /// coordinate `i`). Coordinates outside `[0, n-1]` are clamped to the
    /// boundary; the gradient along a clamped axis is zero.
    pub fn sample(&self, p: Vec3) -> Result<GridSample> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(invalid(format!("grid sample position {p:?} is not finite")));
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut clamped = [false; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let hi = (n - 1) as f64;
            let mut c = p[a];
            if c < 0.0 || c > hi {
                clamped[a] = true;
                c = c.clamp(0.0, hi);
            }
            if n == 1 {
                clamped[a] = true;
                continue;
            }
            let i0 = (c.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = c - i0 as f64;
        }
        let mut corners = [0usize; 8];
        let mut weights = [0.0; 8];
        let mut features = vec![0.0; self.channels];
        for corner in 0..8 {
            let mut idx = [0usize; 3];
            let mut w = 1.0;
            // a collapsed axis has frac 0, so its upper corner gets weight 0
            for a in 0..3 {
                let bit = (corner >> (2 - a)) & 1;
                let step = if self.dims[a] > 1 { bit } else { 0 };
                idx[a] = base[a] + step;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            let off = self.cell_offset(idx[0], idx[1], idx[2]);
            corners[corner] = off;
            weights[corner] = w;
            for (f, v) in features.iter_mut().zip(&self.data[off..off + self.channels]) {
                *f += w * v;
            }
        }
        Ok(GridSample { features, corners, weights, frac, clamped })
    }

    /// Scatters `upstream` (gradient w.r.t. the sampled features) into
    /// `d_grid` and returns the gradient w.r.t. the sample position.
    pub fn sample_backward(&self, s: &GridSample, upstream: &[f64], d_grid: &mut [f64]) -> Vec3 {
        for corner in 0..8 {
            let off = s.corners[corner];
            let w = s.weights[corner];
            for (d, u) in d_grid[off..off + self.channels].iter_mut().zip(upstream) {
                *d += w * u;
            }
        }
        self.sample_position_gradient(s, upstream)
    }

    /// Gradient w.r.t. the sample position alone.
    pub fn sample_position_gradient(&self, s: &GridSample, upstream: &[f64]) -> Vec3 {
        let mut d_p = Vec3::zeros();
        for corner in 0..8 {
            let off = s.corners[corner];
            let dot: f64 = self.data[off..off + self.channels].iter().zip(upstream).map(|(v, u)| v * u).sum();
            for a in 0..3 {
                if s.clamped[a] {
                    continue;
                }
                // dw/dfrac_a: swap this axis' factor for its derivative.
                let mut dw = 1.0;
                for b in 0..3 {
                    let bit = (corner >> (2 - b)) & 1;
                    if b == a {
                        dw *= if bit == 1 { 1.0 } else { -1.0 };
                    } else {
                        dw *= if bit == 1 { s.frac[b] } else { 1.0 - s.frac[b] };
                    }
                }
                d_p[a] += dw * dot;
            }
        }
        d_p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quat(rng: &mut impl Rng) -> Quat {
        Quat::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            .normalize()
            .unwrap()
    }

    #[test]
    fn identity_and_half_turn_rotations() {
        assert_eq!(quat_to_rotation(Quat::IDENTITY).unwrap(), Mat3::identity());
        let r = quat_to_rotation(Quat::new(0.0, 1.0, 0.0, 0.0)).unwrap();
        assert_eq!(r, Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)));
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert!(quat_to_rotation(Quat::new(0.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let r = quat_to_rotation(random_unit_quat(&mut rng)).unwrap();
            let e = r.transpose() * r - Mat3::identity();
            assert!(e.amax() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let q = Quat::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.5, -0.1);
            let a = q.normalize().unwrap();
            let b = a.normalize().unwrap();
            assert!((a.norm() - 1.0).abs() < 1e-9);
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q = Quat::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.3);
            let g = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let f = |q: Quat| quat_to_rotation(q).unwrap().component_mul(&g).sum();
            let analytic = quat_to_rotation_backward(q, &g).unwrap();
            let eps = 1e-6;
            for i in 0..4 {
                let mut a = q.to_array();
                let mut b = q.to_array();
                a[i] += eps;
                b[i] -= eps;
                let fd = (f(Quat::from_array(a)) - f(Quat::from_array(b))) / (2.0 * eps);
                assert!((fd - analytic[i]).abs() < 1e-7, "{i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn hamilton_product_composes_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_unit_quat(&mut rng);
        let b = random_unit_quat(&mut rng);
        let lhs = quat_to_rotation(a.mul(b)).unwrap();
        let rhs = quat_to_rotation(a).unwrap() * quat_to_rotation(b).unwrap();
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn affine_identity_layer() {
        let layer = Affine::from_parts(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let (y, tape) = layer.forward_tape(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
        let g = tape.backward(&layer, &[0.25, -4.0]).unwrap();
        assert_eq!(g.d_input, vec![0.25, -4.0]);
    }

    #[test]
    fn affine_scalar_layer() {
        let layer = Affine::from_parts(1, 1, vec![3.0], vec![1.0]).unwrap();
        let (y, tape) = layer.forward_tape(&[2.0]).unwrap();
        assert_eq!(y, vec![7.0]);
        let g = tape.backward(&layer, &[1.0]).unwrap();
        assert_eq!(g.d_input, vec![3.0]);
        assert_eq!(g.d_weights, vec![2.0]);
        assert_eq!(g.d_biases, vec![1.0]);
    }

    #[test]
    fn affine_dimension_mismatch() {
        let layer = Affine::zeros(3, 2);
        assert!(layer.forward(&[1.0, 2.0]).is_err());
        let (_, tape) = layer.forward_tape(&[1.0, 2.0, 3.0]).unwrap();
        assert!(tape.backward(&layer, &[1.0]).is_err());
        assert!(Affine::from_parts(2, 2, vec![0.0; 3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn affine_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (i, o) = (5, 4);
        let w: Vec<f64> = (0..i * o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..i).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layer = Affine::from_parts(i, o, w.clone(), b.clone()).unwrap();
        let (_, tape) = layer.forward_tape(&x).unwrap();
        let g = tape.backward(&layer, &up).unwrap();
        let loss = |w: &[f64]| {
            let l = Affine::from_parts(i, o, w.to_vec(), b.clone()).unwrap();
            l.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let eps = 1e-4;
        for k in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[k] += eps;
            wm[k] -= eps;
            let fd = (loss(&wp) - loss(&wm)) / (2.0 * eps);
            let rel = (fd - g.d_weights[k]).abs() / fd.abs().max(g.d_weights[k].abs()).max(1e-12);
            assert!(rel < 1e-5, "weight {k}: fd {fd} analytic {}", g.d_weights[k]);
        }
    }

    #[test]
    fn two_layer_jvp_matches_directional_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rand_layer = |i: usize, o: usize| {
            Affine::from_parts(
                i,
                o,
                (0..i * o).map(|_| rng.gen_range(-0.8..0.8)).collect(),
                (0..o).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap()
        };
        let l1 = rand_layer(6, 8);
        let l2 = rand_layer(8, 3);
        let net = |x: &[f64]| l2.forward(&tanh_forward(&l1.forward(x).unwrap())).unwrap();
        let x: Vec<f64> = (0..6).map(|k| 0.1 * k as f64 - 0.2).collect();
        let dir: Vec<f64> = (0..6).map(|k| ((k * 7) % 5) as f64 / 5.0 - 0.4).collect();
        // Reverse mode gives the Jacobian row by row; contract with `dir`.
        let (h_pre, t1) = l1.forward_tape(&x).unwrap();
        let h = tanh_forward(&h_pre);
        let (_, t2) = l2.forward_tape(&h).unwrap();
        let eps = 1e-4;
        let plus: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + eps * d).collect();
        let minus: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - eps * d).collect();
        let (yp, ym) = (net(&plus), net(&minus));
        for out in 0..3 {
            let mut up = vec![0.0; 3];
            up[out] = 1.0;
            let g2 = t2.backward(&l2, &up).unwrap();
            let g1 = t1.backward(&l1, &tanh_backward(&h, &g2.d_input)).unwrap();
            let jvp: f64 = g1.d_input.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let fd = (yp[out] - ym[out]) / (2.0 * eps);
            assert!((jvp - fd).abs() / fd.abs().max(1e-8) < 1e-4, "output {out}: {jvp} vs {fd}");
        }
    }

    fn random_grid(rng: &mut impl Rng, dims: [usize; 3], c: usize) -> FeatureGrid {
        let n = dims.iter().product::<usize>() * c;
        FeatureGrid::from_data(dims, c, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grid_sample_at_corner_returns_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_grid(&mut rng, [4, 5, 3], 2);
        let s = g.sample(Vec3::new(1.0, 2.0, 2.0)).unwrap();
        assert_eq!(s.features, g.cell(1, 2, 2).to_vec());
        let s = g.sample(Vec3::new(3.0, 4.0, 2.0)).unwrap();
        assert_eq!(s.features, g.cell(3, 4, 2).to_vec());
    }

    #[test]
    fn grid_sample_of_constant_cells() {
        let g = FeatureGrid::from_data([2, 2, 2], 1, vec![0.75; 8]).unwrap();
        let s = g.sample(Vec3::new(0.5, 0.5, 0.5)).unwrap();
        assert!((s.features[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn grid_sample_rejects_non_finite() {
        let g = FeatureGrid::zeros([2, 2, 2], 1).unwrap();
        assert!(g.sample(Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn grid_sample_clamps_out_of_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = random_grid(&mut rng, [3, 3, 3], 2);
        let inside = g.sample(Vec3::new(2.0, 1.0, 0.0)).unwrap();
        let outside = g.sample(Vec3::new(7.5, 1.0, -3.0)).unwrap();
        assert_eq!(inside.features, outside.features);
        let mut d_grid = vec![0.0; g.data.len()];
        let d_p = g.sample_backward(&outside, &[1.0, -1.0], &mut d_grid);
        assert_eq!(d_p.x, 0.0);
        assert_eq!(d_p.z, 0.0);
    }

    #[test]
    fn grid_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = random_grid(&mut rng, [5, 4, 6], 3);
        let up = [0.3, -1.2, 0.7];
        let loss = |g: &FeatureGrid, p: Vec3| g.sample(p).unwrap().features.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let eps = 1e-4;
        let mut checked = 0;
        let mut bad = 0;
        for _ in 0..50 {
            let p = Vec3::new(rng.gen_range(0.1..3.9), rng.gen_range(0.1..2.9), rng.gen_range(0.1..4.9));
            let s = g.sample(p).unwrap();
            let mut d_grid = vec![0.0; g.data.len()];
            let d_p = g.sample_backward(&s, &up, &mut d_grid);
            for a in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[a] += eps;
                pm[a] -= eps;
                let fd = (loss(&g, pp) - loss(&g, pm)) / (2.0 * eps);
                checked += 1;
                if (fd - d_p[a]).abs() / fd.abs().max(d_p[a].abs()).max(1e-8) >= 1e-4 {
                    bad += 1;
                }
            }
            // grid values enter linearly, so the scattered gradient is exact
            let k = s.corners[rng.gen_range(0..8)] + 1;
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp.data[k] += eps;
            gm.data[k] -= eps;
            let fd = (loss(&gp, p) - loss(&gm, p)) / (2.0 * eps);
            assert!((fd - d_grid[k]).abs() < 1e-9);
        }
        // Integer crossings make a few samples one-sided.
        assert!(bad * 100 <= checked, "{bad} of {checked} position gradients off");
    }
}
