//! Token mechanics of a multi-view video transformer at toy scale: condition
//! latent concatenation, patchify, Plücker camera tokens, and a dual
//! attention block that attends once per view over (frame, token) and once
//! per frame over (view, token).
//!
//! Pixel video `4f × 8h × 8w` compresses to latent `f × h × w`; a reference
//! frame prepended on the frame axis gives `f + 1` latent frames, and
//! `n × n` patches give `(h/n)·(w/n)` tokens per frame.

use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

/// Channels of one latent (content or pose).
pub const LATENT_CHANNELS: usize = 16;
/// Spatial compression of the video autoencoder.
pub const SPATIAL_FACTOR: usize = 8;
/// Temporal compression of the video autoencoder.
pub const TEMPORAL_FACTOR: usize = 4;
/// Channels of a Plücker ray map: moment then direction.
pub const PLUCKER_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub views: usize,
    /// Latent frames of the generated video, reference excluded; 0 leaves
    /// only the reference frame.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    pub token_channels: usize,
}

fn default_patch() -> usize {
    2
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.height == 0 || self.width == 0 || self.patch == 0 || self.token_channels == 0 {
            return Err(invalid(format!("latent spec {self:?} has a zero dimension")));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(invalid(format!("latent {}×{} is not divisible by patch {}", self.height, self.width, self.patch)));
        }
        Ok(())
    }

    /// Latent frames including the prepended reference.
    pub fn token_frames(&self) -> usize {
        self.frames + 1
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Pixel height and width of a frame.
    pub fn pixel_dims(&self) -> (usize, usize) {
        (SPATIAL_FACTOR * self.height, SPATIAL_FACTOR * self.width)
    }

    /// Side of a pixel patch covering one token.
    pub fn pixel_patch(&self) -> usize {
        SPATIAL_FACTOR * self.patch
    }
}

/// Prepends the reference latents on the frame axis and pairs content with
/// pose on the channel axis: `[z_ref ; z_video] ⊕ [z_ref_pose ; z_pose]`.
/// Inputs are `(frames, h, w, 16)`; the output is `(f + 1, h, w, 32)`.
pub fn concat_condition_latents<'a>(
    z_ref: ArrayView4<'a, f64>,
    z_video: ArrayView4<'a, f64>,
    z_ref_pose: ArrayView4<'a, f64>,
    z_pose: ArrayView4<'a, f64>,
) -> Result<Array4<f64>> {
    let (f, h, w, c) = z_video.dim();
    let expect = |name: &str, got: (usize, usize, usize, usize), want: (usize, usize, usize, usize)| {
        if got == want {
            Ok(())
        } else {
            Err(shape(format!("{name} has shape {got:?}, expected {want:?}")))
        }
    };
    if c != LATENT_CHANNELS || f == 0 {
        return Err(shape(format!("video latent has shape {:?}, expected (f ≥ 1, h, w, {LATENT_CHANNELS})", z_video.dim())));
    }
    expect("reference latent", z_ref.dim(), (1, h, w, c))?;
    expect("reference pose latent", z_ref_pose.dim(), (1, h, w, c))?;
    expect("pose latent", z_pose.dim(), (f, h, w, c))?;
    let content = concatenate(Axis(0), &[z_ref, z_video]).map_err(|e| shape(e.to_string()))?;
    let pose = concatenate(Axis(0), &[z_ref_pose, z_pose]).map_err(|e| shape(e.to_string()))?;
    concatenate(Axis(3), &[content.view(), pose.view()]).map_err(|e| shape(e.to_string()))
}

/// Folds `n × n` spatial patches into channels: `(F, h, w, c)` becomes
/// `(F, (h/n)·(w/n), n·n·c)` with tokens in row-major patch order and
/// channels ordered `(dy, dx, c)`.
pub fn patchify(latent: &Array4<f64>, n: usize) -> Result<Array3<f64>> {
    let (f, h, w, c) = latent.dim();
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(shape(format!("latent {h}×{w} is not divisible by patch {n}")));
    }
    let (ph, pw) = (h / n, w / n);
    let mut out = Array3::zeros((f, ph * pw, n * n * c));
    for fi in 0..f {
        for py in 0..ph {
            for px in 0..pw {
                let t = py * pw + px;
                for dy in 0..n {
                    for dx in 0..n {
                        for ch in 0..c {
                            out[[fi, t, (dy * n + dx) * c + ch]] = latent[[fi, py * n + dy, px * n + dx, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Array3<f64>, n: usize, h: usize, w: usize) -> Result<Array4<f64>> {
    let (f, t, k) = tokens.dim();
    if n == 0 || !h.is_multiple_of(n) || !w.is_multiple_of(n) || t != (h / n) * (w / n) || k % (n * n) != 0 {
        return Err(shape(format!("tokens {:?} do not fold back to {h}×{w} with patch {n}", tokens.dim())));
    }
    let c = k / (n * n);
    let pw = w / n;
    let mut out = Array4::zeros((f, h, w, c));
    for ((fi, ti, ki), &v) in tokens.indexed_iter() {
        let (py, px) = (ti / pw, ti % pw);
        let (d, ch) = (ki / c, ki % c);
        out[[fi, py * n + d / n, px * n + d % n, ch]] = v;
    }
    Ok(out)
}

/// Per-pixel Plücker coordinates `(o × d, d)` of the ray through each pixel
/// center, with `o` the camera center and `d` the unit world direction.
/// Output is `(6, height, width)`.
pub fn plucker_embedding(intrinsics: &Matrix3<f64>, extrinsics: &Matrix4<f64>, width: usize, height: usize) -> Result<Array3<f64>> {
    let k_inv = intrinsics.try_inverse().filter(|m| m.iter().all(|v| v.is_finite())).ok_or_else(|| invalid("intrinsics matrix is singular"))?;
    let rot = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
    let trans = extrinsics.fixed_view::<3, 1>(0, 3).into_owned();
    let center = -(rot.transpose() * trans);
    let mut out = Array3::zeros((PLUCKER_CHANNELS, height, width));
    for y in 0..height {
        for x in 0..width {
            let cam = k_inv * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            let d = (rot.transpose() * cam).normalize();
            let m = center.cross(&d);
            for a in 0..3 {
                out[[a, y, x]] = m[a];
                out[[3 + a, y, x]] = d[a];
            }
        }
    }
    Ok(out)
}

/// Linear patch encoder equivalent to a convolution with kernel and stride
/// equal to the patch side, mapping 6 channels to `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEncoder {
    pub patch: usize,
    /// `(C, 6·patch·patch)`, input ordered `(channel, dy, dx)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl PatchEncoder {
    pub fn random(patch: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = PLUCKER_CHANNELS * patch * patch;
        let limit = (1.0 / fan_in as f64).sqrt();
        PatchEncoder {
            patch,
            weights: Array2::from_shape_fn((channels, fan_in), |_| rng.gen_range(-limit..limit)),
            bias: Array1::from_shape_fn(channels, |_| rng.gen_range(-limit..limit)),
        }
    }
}

/// One view's camera tokens, shaped like a frame's token block `(T, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraToken {
    pub tokens: Array2<f64>,
}

/// Encodes a `(6, 8h, 8w)` Plücker map into `(h/n)·(w/n)` tokens.
pub fn encode_camera_tokens(map: &Array3<f64>, spec: &LatentSpec, encoder: &PatchEncoder) -> Result<CameraToken> {
    spec.validate()?;
    let (ph, pw) = spec.pixel_dims();
    let p = spec.pixel_patch();
    if map.dim() != (PLUCKER_CHANNELS, ph, pw) {
        return Err(shape(format!("Plücker map {:?}, expected {:?}", map.dim(), (PLUCKER_CHANNELS, ph, pw))));
    }
    if encoder.patch != p || encoder.weights.ncols() != PLUCKER_CHANNELS * p * p || encoder.bias.len() != encoder.weights.nrows() {
        return Err(shape(format!("encoder for patch {} with weights {:?} cannot encode {p}-pixel patches", encoder.patch, encoder.weights.dim())));
    }
    if encoder.weights.nrows() != spec.token_channels {
        return Err(shape(format!("encoder emits {} channels, spec wants {}", encoder.weights.nrows(), spec.token_channels)));
    }
    let cols = spec.width / spec.patch;
    let mut tokens = Array2::zeros((spec.tokens_per_frame(), spec.token_channels));
    for (t, mut row) in tokens.outer_iter_mut().enumerate() {
        let (py, px) = (t / cols, t % cols);
        let patch = map.slice(s![.., py * p..(py + 1) * p, px * p..(px + 1) * p]);
        let flat = Array1::from_iter(patch.iter().copied());
        row.assign(&(encoder.weights.dot(&flat) + &encoder.bias));
    }
    Ok(CameraToken { tokens })
}

/// Tokens indexed `(view, frame, token, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub spec: LatentSpec,
    pub data: Array4<f64>,
}

impl TokenGrid {
    pub fn new(spec: LatentSpec, data: Array4<f64>) -> Result<Self> {
        spec.validate()?;
        let want = (spec.views, spec.token_frames(), spec.tokens_per_frame(), spec.token_channels);
        if data.dim() != want {
            return Err(shape(format!("token grid {:?}, spec needs {want:?}", data.dim())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("token grid has non-finite entries"));
        }
        Ok(TokenGrid { spec, data })
    }

    pub fn random(spec: LatentSpec, rng: &mut impl Rng) -> Result<Self> {
        let dim = (spec.views, spec.token_frames(), spec.tokens_per_frame(), spec.token_channels);
        TokenGrid::new(spec, Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0)))
    }
}

/// `V` sequences of length `(f+1)·T`: element `(v, f, t, c)` lands at `(v, f·T + t, c)`.
pub fn rearrange_temporal(x: &TokenGrid) -> Array3<f64> {
    let (v, f, t, c) = x.data.dim();
    x.data.as_standard_layout().into_owned().into_shape_with_order((v, f * t, c)).unwrap()
}

/// `f+1` sequences of length `V·T`: element `(v, f, t, c)` lands at `(f, v·T + t, c)`.
pub fn rearrange_view(x: &TokenGrid) -> Array3<f64> {
    let (v, f, t, c) = x.data.dim();
    x.data.view().permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned().into_shape_with_order((f, v * t, c)).unwrap()
}

pub fn inverse_temporal(seqs: Array3<f64>, spec: LatentSpec) -> Result<TokenGrid> {
    let (v, f, t, c) = (spec.views, spec.token_frames(), spec.tokens_per_frame(), spec.token_channels);
    if seqs.dim() != (v, f * t, c) {
        return Err(shape(format!("temporal sequences {:?}, expected {:?}", seqs.dim(), (v, f * t, c))));
    }
    let data = seqs.as_standard_layout().into_owned().into_shape_with_order((v, f, t, c)).unwrap();
    TokenGrid::new(spec, data)
}

pub fn inverse_view(seqs: Array3<f64>, spec: LatentSpec) -> Result<TokenGrid> {
    let (v, f, t, c) = (spec.views, spec.token_frames(), spec.tokens_per_frame(), spec.token_channels);
    if seqs.dim() != (f, v * t, c) {
        return Err(shape(format!("view sequences {:?}, expected {:?}", seqs.dim(), (f, v * t, c))));
    }
    let data = seqs.as_standard_layout().into_owned().into_shape_with_order((f, v, t, c)).unwrap();
    TokenGrid::new(spec, data.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned())
}

/// Single-head attention projections, each `(C, C)` acting on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

impl AttentionWeights {
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let limit = (1.0 / channels as f64).sqrt();
        let mut m = || Array2::from_shape_fn((channels, channels), |_| rng.gen_range(-limit..limit));
        AttentionWeights { query: m(), key: m(), value: m(), output: m() }
    }

    fn channels(&self) -> usize {
        self.query.nrows()
    }

    fn check(&self, channels: usize) -> Result<()> {
        for m in [&self.query, &self.key, &self.value, &self.output] {
            if m.dim() != (channels, channels) {
                return Err(shape(format!("attention projection {:?} for {channels} channels", m.dim())));
            }
        }
        Ok(())
    }
}

/// Softmax attention over one sequence `(L, C)`; returns the projected
/// output and the `(L, L)` attention matrix.
pub fn attention(seq: ArrayView2<f64>, w: &AttentionWeights) -> Result<(Array2<f64>, Array2<f64>)> {
    w.check(seq.ncols())?;
    let q = seq.dot(&w.query);
    let k = seq.dot(&w.key);
    let v = seq.dot(&w.value);
    let mut scores = q.dot(&k.t()) / (w.channels() as f64).sqrt();
    for mut row in scores.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok((scores.dot(&v).dot(&w.output), scores))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualAttentionWeights {
    /// Attention within each view over all its frames' tokens.
    pub temporal: AttentionWeights,
    /// Attention within each frame over all views' tokens.
    pub view: AttentionWeights,
}

impl DualAttentionWeights {
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        DualAttentionWeights { temporal: AttentionWeights::random(channels, rng), view: AttentionWeights::random(channels, rng) }
    }
}

/// Adds each view's camera tokens to every frame of that view.
pub fn inject_camera(x: &TokenGrid, camera: &[CameraToken]) -> Result<TokenGrid> {
    if camera.len() != x.spec.views {
        return Err(shape(format!("{} camera token blocks for {} views", camera.len(), x.spec.views)));
    }
    let mut out = x.clone();
    for (mut view, cam) in out.data.outer_iter_mut().zip(camera) {
        if cam.tokens.dim() != (x.spec.tokens_per_frame(), x.spec.token_channels) {
            return Err(shape(format!("camera tokens {:?}, expected one frame block", cam.tokens.dim())));
        }
        for mut frame in view.outer_iter_mut() {
            frame += &cam.tokens;
        }
    }
    Ok(out)
}

/// `x + ½(temporal(h) + view(h))` with `h = x + camera tokens`, where the
/// two branches attend over [`rearrange_temporal`] and [`rearrange_view`]
/// layouts of the same `h`.
pub fn dual_attention_block(x: &TokenGrid, camera: &[CameraToken], w: &DualAttentionWeights) -> Result<TokenGrid> {
    let spec = x.spec;
    let h = inject_camera(x, camera)?;
    let run = |seqs: Array3<f64>, aw: &AttentionWeights| -> Result<Array3<f64>> {
        let mut out = Array3::zeros(seqs.dim());
        for (seq, mut dst) in seqs.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&attention(seq, aw)?.0);
        }
        Ok(out)
    };
    let temporal = inverse_temporal(run(rearrange_temporal(&h), &w.temporal)?, spec)?;
    let view = inverse_view(run(rearrange_view(&h), &w.view)?, spec)?;
    TokenGrid::new(spec, &x.data + &((&temporal.data + &view.data) * 0.5))
}

/// One named tensor shape of the pipeline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeEntry {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

/// Shapes from pixel video to attention layouts for `spec`.
pub fn shape_ledger(spec: &LatentSpec) -> Result<Vec<ShapeEntry>> {
    spec.validate()?;
    let (ph, pw) = spec.pixel_dims();
    let (v, f, h, w, n, c) = (spec.views, spec.frames, spec.height, spec.width, spec.patch, spec.token_channels);
    let t = spec.tokens_per_frame();
    let e = |name, shape: &[usize]| ShapeEntry { name, shape: shape.to_vec() };
    Ok(vec![
        e("target video", &[v, TEMPORAL_FACTOR * f + 1, ph, pw, 3]),
        e("reference latent", &[1, h, w, LATENT_CHANNELS]),
        e("video latent", &[f, h, w, LATENT_CHANNELS]),
        e("pose latent", &[f, h, w, LATENT_CHANNELS]),
        e("conditioned latent", &[f + 1, h, w, 2 * LATENT_CHANNELS]),
        e("patchified latent", &[f + 1, t, n * n * 2 * LATENT_CHANNELS]),
        e("tokens", &[v, f + 1, t, c]),
        e("plucker map", &[PLUCKER_CHANNELS, ph, pw]),
        e("camera tokens", &[t, c]),
        e("temporal layout", &[v, (f + 1) * t, c]),
        e("view layout", &[f + 1, v * t, c]),
        e("dual attention output", &[v, f + 1, t, c]),
    ])
}

/// One line per entry: name, then dimensions joined by `×`.
pub fn format_ledger(entries: &[ShapeEntry]) -> String {
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    entries
        .iter()
        .map(|e| {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            format!("{:<width$}  {}\n", e.name, dims.join(" × "))
        })
        .collect()
}
