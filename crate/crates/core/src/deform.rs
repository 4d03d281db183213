//! Time-conditioned deformation of a canonical Gaussian cloud.
//!
//! A feature grid over the scene box plus a two-layer tanh head maps
//! `(grid(X) ⊕ γ(X) ⊕ γ(t))` to per-Gaussian offsets for position, rotation
//! (additive quaternion increment) and opacity logit. The head's output
//! layer starts at zero, so a fresh field leaves the cloud untouched.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::gaussians::GaussianCloud;
use crate::numerics::{tanh_backward, Affine, FeatureGrid, GridSample, Vec3};
use crate::ply::{read_ply_bytes, write_ply_bytes, PlyPrecision};

/// Fourier features `x ↦ (x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx))`,
/// applied per coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
}

impl PositionalEncoding {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.num_frequencies + 1)
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        self.encode_into(x, &mut out);
        out
    }

    fn encode_into(&self, x: &[f64], out: &mut Vec<f64>) {
        for &v in x {
            out.push(v);
            let mut freq = std::f64::consts::PI;
            for _ in 0..self.num_frequencies {
                let (s, c) = (freq * v).sin_cos();
                out.push(s);
                out.push(c);
                freq *= 2.0;
            }
        }
    }

    /// Gradient w.r.t. `x` given the gradient w.r.t. `encode(x)`.
    pub fn backward(&self, x: &[f64], d_out: &[f64]) -> Vec<f64> {
        let block = 2 * self.num_frequencies + 1;
        x.iter()
            .zip(d_out.chunks_exact(block))
            .map(|(&v, d)| {
                let mut g = d[0];
                let mut freq = std::f64::consts::PI;
                for f in 0..self.num_frequencies {
                    let (s, c) = (freq * v).sin_cos();
                    g += freq * (c * d[1 + 2 * f] - s * d[2 + 2 * f]);
                    freq *= 2.0;
                }
                g
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub grid_resolution: usize,
    pub feature_dim: usize,
    pub space_frequencies: usize,
    pub time_frequencies: usize,
    pub hidden_width: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { grid_resolution: 32, feature_dim: 16, space_frequencies: 6, time_frequencies: 4, hidden_width: 64 }
    }
}

impl FieldConfig {
    pub fn input_dim(&self) -> usize {
        self.feature_dim
            + PositionalEncoding { num_frequencies: self.space_frequencies }.output_dim(3)
            + PositionalEncoding { num_frequencies: self.time_frequencies }.output_dim(1)
    }

    fn validate(&self) -> Result<()> {
        if self.grid_resolution < 2 || self.feature_dim == 0 || self.hidden_width == 0 {
            return Err(invalid(format!("field config {self:?}: grid resolution must be ≥ 2 and widths nonzero")));
        }
        Ok(())
    }
}

/// Number of head outputs: Δposition (3), Δquaternion (4), Δopacity logit (1).
pub const FIELD_OUTPUTS: usize = 8;

/// Axis-aligned box mapped onto the unit cube before grid lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    /// Bounding box of `positions`, grown by `margin` times its extent on each side.
    pub fn around(positions: &[[f64; 3]], margin: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(invalid("cannot bound an empty point set"));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        for a in 0..3 {
            let pad = margin * (max[a] - min[a]).max(1e-3);
            min[a] -= pad;
            max[a] += pad;
        }
        SceneBounds::new(min, max)
    }

    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(invalid(format!("scene bounds {min:?}..{max:?} must be finite and non-degenerate")));
        }
        Ok(SceneBounds { min, max })
    }

    fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.min[a]) / (self.max[a] - self.min[a]))
    }

    fn inv_extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| 1.0 / (self.max[a] - self.min[a]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub config: FieldConfig,
    pub bounds: SceneBounds,
    pub grid: FeatureGrid,
    pub hidden: Affine,
    pub output: Affine,
}

/// Gradients for every trainable tensor of a [`DeformationField`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradients {
    pub grid: Vec<f64>,
    pub hidden: Affine,
    pub output: Affine,
}

impl DeformationField {
    /// Grid features and hidden weights are drawn uniformly at small scale;
    /// the output layer is zero.
    pub fn new(config: FieldConfig, bounds: SceneBounds, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let r = config.grid_resolution;
        let mut grid = FeatureGrid::zeros([r; 3], config.feature_dim)?;
        for v in grid.data.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        let in_dim = config.input_dim();
        let mut hidden = Affine::zeros(in_dim, config.hidden_width);
        let limit = (6.0 / (in_dim + config.hidden_width) as f64).sqrt();
        for w in hidden.weights.iter_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        let output = Affine::zeros(config.hidden_width, FIELD_OUTPUTS);
        Ok(DeformationField { config, bounds, grid, hidden, output })
    }

    pub fn zero_gradients(&self) -> FieldGradients {
        FieldGradients {
            grid: vec![0.0; self.grid.data.len()],
            hidden: Affine::zeros(self.hidden.in_dim, self.hidden.out_dim),
            output: Affine::zeros(self.output.in_dim, self.output.out_dim),
        }
    }

    pub fn groups(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("field.grid", &self.grid.data),
            ("field.hidden.weights", &self.hidden.weights),
            ("field.hidden.biases", &self.hidden.biases),
            ("field.output.weights", &self.output.weights),
            ("field.output.biases", &self.output.biases),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut [f64]); 5] {
        [
            ("field.grid", &mut self.grid.data),
            ("field.hidden.weights", &mut self.hidden.weights),
            ("field.hidden.biases", &mut self.hidden.biases),
            ("field.output.weights", &mut self.output.weights),
            ("field.output.biases", &mut self.output.biases),
        ]
    }

    /// Order-sensitive hash of all parameter bits, for detecting changes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, g) in self.groups() {
            for v in g {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("normalized time {t} outside [0, 1]")));
        }
        Ok(())
    }

    fn eval_one(&self, position: [f64; 3], t: f64) -> Result<PointTape> {
        let x_hat = self.bounds.normalize(position);
        let scale = (self.config.grid_resolution - 1) as f64;
        let sample = self.grid.sample(Vec3::new(x_hat[0] * scale, x_hat[1] * scale, x_hat[2] * scale))?;
        let mut input = Vec::with_capacity(self.hidden.in_dim);
        input.extend_from_slice(&sample.features);
        PositionalEncoding { num_frequencies: self.config.space_frequencies }.encode_into(&x_hat, &mut input);
        PositionalEncoding { num_frequencies: self.config.time_frequencies }.encode_into(&[t], &mut input);
        let mut hidden = self.hidden.biases.clone();
        self.hidden.forward_into(&input, &mut hidden);
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        let mut out = self.output.biases.clone();
        self.output.forward_into(&hidden, &mut out);
        Ok(PointTape { x_hat, sample, input, hidden, out })
    }

    /// Raw head output `(Δposition, Δquaternion, Δopacity logit)` at one point.
    pub fn offsets(&self, position: [f64; 3], t: f64) -> Result<[f64; FIELD_OUTPUTS]> {
        Self::check_time(t)?;
        let tape = self.eval_one(position, t)?;
        Ok(tape.out.try_into().unwrap())
    }
}

struct PointTape {
    x_hat: [f64; 3],
    sample: GridSample,
    input: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

/// Cloud posed at normalized time `t`. Rotations hold `q + Δq`; the
/// renderer normalizes them.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedCloud {
    pub cloud: GaussianCloud,
    pub time: f64,
}

/// Forward activations kept for [`deform_backward`].
pub struct DeformTape {
    points: Vec<PointTape>,
}

/// Normalized time of frame `frame` in a `num_frames`-frame sequence; a
/// single-frame sequence maps to 0.
pub fn normalized_time(frame: f64, num_frames: usize) -> f64 {
    if num_frames <= 1 {
        0.0
    } else {
        frame / (num_frames - 1) as f64
    }
}

pub fn deform_cloud(field: &DeformationField, cloud: &GaussianCloud, t: f64) -> Result<DeformedCloud> {
    Ok(deform_cloud_tape(field, cloud, t)?.0)
}

pub fn deform_cloud_tape(field: &DeformationField, cloud: &GaussianCloud, t: f64) -> Result<(DeformedCloud, DeformTape)> {
    DeformationField::check_time(t)?;
    let points: Vec<PointTape> =
        cloud.positions.par_iter().map(|&p| field.eval_one(p, t)).collect::<Result<_>>()?;
    let mut posed = cloud.clone();
    for (i, tape) in points.iter().enumerate() {
        let o = &tape.out;
        for a in 0..3 {
            posed.positions[i][a] += o[a];
        }
        for a in 0..4 {
            posed.rotations[i][a] += o[3 + a];
        }
        posed.opacity_logits[i] += o[7];
    }
    Ok((DeformedCloud { cloud: posed, time: t }, DeformTape { points }))
}

/// Back-propagates gradients w.r.t. the posed cloud into the field and the
/// canonical cloud. `d_posed` has the cloud layout.
pub fn deform_backward(
    field: &DeformationField,
    tape: &DeformTape,
    d_posed: &GaussianCloud,
) -> Result<(FieldGradients, GaussianCloud)> {
    let mut grads = field.zero_gradients();
    let d_canonical = deform_backward_accumulate(field, tape, d_posed, &mut grads)?;
    Ok((grads, d_canonical))
}

/// [`deform_backward`] adding the field gradients into `grads`.
pub fn deform_backward_accumulate(
    field: &DeformationField,
    tape: &DeformTape,
    d_posed: &GaussianCloud,
    grads: &mut FieldGradients,
) -> Result<GaussianCloud> {
    if d_posed.len() != tape.points.len() {
        return Err(shape(format!("{} gradients for {} deformed Gaussians", d_posed.len(), tape.points.len())));
    }
    let cfg = field.config;
    let space_pe = PositionalEncoding { num_frequencies: cfg.space_frequencies };
    let scale = (cfg.grid_resolution - 1) as f64;
    let inv_extent = field.bounds.inv_extent();
    let fd = cfg.feature_dim;
    let pe_dim = space_pe.output_dim(3);

    struct PointGrad {
        d_out: [f64; FIELD_OUTPUTS],
        d_pre: Vec<f64>,
        d_features: Vec<f64>,
        d_position: [f64; 3],
    }

    let per_point: Vec<PointGrad> = tape
        .points
        .par_iter()
        .enumerate()
        .map(|(i, pt)| {
            let p = d_posed.positions[i];
            let q = d_posed.rotations[i];
            let d_out = [p[0], p[1], p[2], q[0], q[1], q[2], q[3], d_posed.opacity_logits[i]];
            let mut d_hidden = vec![0.0; cfg.hidden_width];
            for (o, &g) in d_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &field.output.weights[o * cfg.hidden_width..(o + 1) * cfg.hidden_width];
                for (dh, w) in d_hidden.iter_mut().zip(row) {
                    *dh += g * w;
                }
            }
            let d_pre = tanh_backward(&pt.hidden, &d_hidden);
            let mut d_input = vec![0.0; field.hidden.in_dim];
            for (o, &g) in d_pre.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &field.hidden.weights[o * field.hidden.in_dim..(o + 1) * field.hidden.in_dim];
                for (di, w) in d_input.iter_mut().zip(row) {
                    *di += g * w;
                }
            }
            let d_features = d_input[..fd].to_vec();
            let d_xhat_pe = space_pe.backward(&pt.x_hat, &d_input[fd..fd + pe_dim]);
            let d_grid_pos = field.grid.sample_position_gradient(&pt.sample, &d_features);
            let d_position = std::array::from_fn(|a| (d_xhat_pe[a] + d_grid_pos[a] * scale) * inv_extent[a] + p[a]);
            PointGrad { d_out, d_pre, d_features, d_position }
        })
        .collect();

    if grads.grid.len() != field.grid.data.len() || grads.hidden.weights.len() != field.hidden.weights.len() {
        return Err(shape("field gradient buffers do not match the field"));
    }
    let mut d_canonical = d_posed.clone();
    for (i, (pt, g)) in tape.points.iter().zip(&per_point).enumerate() {
        field.output.backward_accumulate(&pt.hidden, &g.d_out, &mut grads.output.weights, &mut grads.output.biases, None);
        field.hidden.backward_accumulate(&pt.input, &g.d_pre, &mut grads.hidden.weights, &mut grads.hidden.biases, None);
        for (corner, &off) in pt.sample.corners.iter().enumerate() {
            let w = pt.sample.weights[corner];
            for (dg, df) in grads.grid[off..off + fd].iter_mut().zip(&g.d_features) {
                *dg += w * df;
            }
        }
        d_canonical.positions[i] = g.d_position;
    }
    Ok(d_canonical)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GS4DCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to render the fitted scene at any time.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub canonical: GaussianCloud,
    pub field: DeformationField,
    pub num_frames: usize,
}

impl Checkpoint {
    /// Little-endian layout: magic, version, frame count, field config,
    /// bounds, grid, head tensors, then a double-precision PLY of the
    /// canonical cloud.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.field.config;
        for v in [self.num_frames, c.grid_resolution, c.feature_dim, c.space_frequencies, c.time_frequencies, c.hidden_width] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in self.field.bounds.min.iter().chain(&self.field.bounds.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (_, g) in self.field.groups() {
            for v in g {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let ply = write_ply_bytes(&self.canonical, PlyPrecision::F64);
        out.extend_from_slice(&(ply.len() as u64).to_le_bytes());
        out.extend_from_slice(&ply);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format { what: "checkpoint", detail: detail.to_string() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4).ok_or_else(|| bad("truncated header"))?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut ints = [0usize; 6];
        for v in ints.iter_mut() {
            *v = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        }
        let [num_frames, grid_resolution, feature_dim, space_frequencies, time_frequencies, hidden_width] = ints;
        let config = FieldConfig { grid_resolution, feature_dim, space_frequencies, time_frequencies, hidden_width };
        config.validate()?;
        if grid_resolution > 1024 || feature_dim > 4096 || hidden_width > 1 << 16 || space_frequencies > 64 || time_frequencies > 64 {
            return Err(bad("implausible field dimensions"));
        }
        let mut bounds = [0.0; 6];
        for v in bounds.iter_mut() {
            *v = r.f64().ok_or_else(|| bad("truncated bounds"))?;
        }
        let bounds = SceneBounds::new([bounds[0], bounds[1], bounds[2]], [bounds[3], bounds[4], bounds[5]])?;
        let mut field = DeformationField {
            config,
            bounds,
            grid: FeatureGrid::zeros([grid_resolution; 3], feature_dim)?,
            hidden: Affine::zeros(config.input_dim(), hidden_width),
            output: Affine::zeros(hidden_width, FIELD_OUTPUTS),
        };
        for (_, g) in field.groups_mut() {
            for v in g.iter_mut() {
                *v = r.f64().ok_or_else(|| bad("truncated field tensors"))?;
            }
        }
        let ply_len = r.u64().ok_or_else(|| bad("truncated cloud length"))? as usize;
        let ply = r.take(ply_len).ok_or_else(|| bad("truncated cloud"))?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let canonical = read_ply_bytes(ply)?;
        Ok(Checkpoint { canonical, field, num_frames })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Cloud posed at fractional frame index `frame ∈ [0, T−1]`.
    pub fn pose_at_frame(&self, frame: f64) -> Result<GaussianCloud> {
        let last = self.num_frames.saturating_sub(1) as f64;
        if !(0.0..=last).contains(&frame) {
            return Err(invalid(format!("frame {frame} outside [0, {last}]")));
        }
        Ok(deform_cloud(&self.field, &self.canonical, normalized_time(frame, self.num_frames))?.cloud)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig { grid_resolution: 4, feature_dim: 3, space_frequencies: 2, time_frequencies: 1, hidden_width: 5 }
    }

    fn cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
        let mut c = GaussianCloud::new();
        for _ in 0..n {
            c.push(Gaussian {
                position: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                rotation: [1.0, rng.gen_range(-0.2..0.2), 0.0, 0.1],
                log_scale: [-3.0; 3],
                opacity_logit: 0.5,
                color: [0.3, 0.6, 0.9],
            });
        }
        c
    }

    fn random_field(rng: &mut ChaCha8Rng, cfg: FieldConfig, c: &GaussianCloud) -> DeformationField {
        let mut f = DeformationField::new(cfg, SceneBounds::around(&c.positions, 0.1).unwrap(), rng).unwrap();
        for v in f.output.weights.iter_mut().chain(f.output.biases.iter_mut()).chain(f.hidden.biases.iter_mut()) {
            *v = rng.gen_range(-0.3..0.3);
        }
        f
    }

    #[test]
    fn encoding_examples() {
        let pe = PositionalEncoding { num_frequencies: 2 };
        assert_eq!(pe.encode(&[0.0]), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        let y = PositionalEncoding { num_frequencies: 1 }.encode(&[0.5]);
        assert_eq!(y[0], 0.5);
        assert!((y[1] - 1.0).abs() < 1e-15 && y[2].abs() < 1e-15);
        assert_eq!(pe.encode(&[0.1, 0.2, 0.3]).len(), pe.output_dim(3));
        assert_eq!(FieldConfig::default().input_dim(), 64);
    }

    #[test]
    fn encoding_backward_matches_finite_differences() {
        let pe = PositionalEncoding { num_frequencies: 4 };
        let x = [0.3, -0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let up: Vec<f64> = (0..pe.output_dim(2)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = pe.backward(&x, &up);
        for a in 0..2 {
            let eps = 1e-6;
            let f = |d: f64| {
                let mut y = x;
                y[a] += d;
                pe.encode(&y).iter().zip(&up).map(|(v, u)| v * u).sum::<f64>()
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            assert!((fd - g[a]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn fresh_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cloud(&mut rng, 10);
        let f = DeformationField::new(small_config(), SceneBounds::around(&c.positions, 0.1).unwrap(), &mut rng).unwrap();
        for t in [0.0, 0.37, 1.0] {
            assert_eq!(deform_cloud(&f, &c, t).unwrap().cloud, c);
        }
        assert!(deform_cloud(&f, &c, 1.5).is_err());
        assert!(deform_cloud(&f, &c, -0.1).is_err());
    }

    #[test]
    fn constant_offset_head_shifts_all_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cloud(&mut rng, 6);
        let mut f = DeformationField::new(small_config(), SceneBounds::around(&c.positions, 0.1).unwrap(), &mut rng).unwrap();
        f.output.biases[0] = 1.0;
        let posed = deform_cloud(&f, &c, 0.5).unwrap().cloud;
        for i in 0..6 {
            assert_eq!(posed.positions[i][0], c.positions[i][0] + 1.0);
            assert_eq!(posed.positions[i][1], c.positions[i][1]);
        }
    }

    #[test]
    fn deformation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cloud(&mut rng, 5);
        let f = random_field(&mut rng, small_config(), &c);
        let t = 0.4;
        let mut up = c.zeros_like();
        for (_, g) in up.groups_mut() {
            for v in g.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let objective = |f: &DeformationField, c: &GaussianCloud| -> f64 {
            let posed = deform_cloud(f, c, t).unwrap().cloud;
            posed.groups().iter().zip(up.groups()).map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).sum()
        };
        let (_, tape) = deform_cloud_tape(&f, &c, t).unwrap();
        let (fg, dc) = deform_backward(&f, &tape, &up).unwrap();
        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * eps);
            assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()), "fd {fd} analytic {analytic}");
        };
        let analytic = [fg.grid.clone(), fg.hidden.weights.clone(), fg.hidden.biases.clone(), fg.output.weights.clone(), fg.output.biases.clone()];
        for (gi, grads) in analytic.iter().enumerate() {
            for k in (0..grads.len()).step_by(7) {
                let mut fp = f.clone();
                fp.groups_mut()[gi].1[k] += eps;
                let mut fm = f.clone();
                fm.groups_mut()[gi].1[k] -= eps;
                check(grads[k], objective(&fp, &c), objective(&fm, &c));
            }
        }
        for i in 0..5 {
            for a in 0..3 {
                let mut cp = c.clone();
                cp.positions[i][a] += eps;
                let mut cm = c.clone();
                cm.positions[i][a] -= eps;
                check(dc.positions[i][a], objective(&f, &cp), objective(&f, &cm));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cloud(&mut rng, 7);
        let f = random_field(&mut rng, small_config(), &c);
        let ck = Checkpoint { canonical: c, field: f, num_frames: 8 };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn pose_rejects_extrapolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cloud(&mut rng, 3);
        let f = random_field(&mut rng, small_config(), &c);
        let ck = Checkpoint { canonical: c, field: f, num_frames: 8 };
        assert!(ck.pose_at_frame(2.5).is_ok());
        assert!(ck.pose_at_frame(7.0).is_ok());
        assert!(ck.pose_at_frame(7.01).is_err());
        assert!(ck.pose_at_frame(-1.0).is_err());
    }

    #[test]
    fn checksum_tracks_parameter_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cloud(&mut rng, 3);
        let mut f = random_field(&mut rng, small_config(), &c);
        let before = f.checksum();
        assert_eq!(before, f.clone().checksum());
        f.grid.data[0] += 1e-12;
        assert_ne!(before, f.checksum());
    }
}
