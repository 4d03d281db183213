//! Synthetic animated scenes with known ground truth.
//!
//! A scene is a Gaussian cloud split into rigid groups (a torso and limbs),
//! each moved over time by a swing about a pivot plus a spline translation.
//! Frames are rendered from an orbit rig with this crate's own rasterizer,
//! so a perfect fit reproduces them exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::buffer::{frame_relpath, Image};
use crate::camera::CameraView;
use crate::deform::normalized_time;
use crate::error::{invalid, Error, Result};
use crate::gaussians::{Gaussian, GaussianCloud};
use crate::numerics::{logit, Quat, Vec3};
use crate::rasterizer::{render, RenderOptions};

/// Horizontal orbit of cameras, all aimed at `look_at`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSpec {
    pub num_views: usize,
    pub radius: f64,
    pub fov_deg: f64,
    /// Camera height above `look_at`; the eye stays `radius` away from it.
    pub height: f64,
    pub look_at: [f64; 3],
    pub width: usize,
    pub image_height: usize,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec { num_views: 4, radius: 2.5, fov_deg: 40.0, height: 0.0, look_at: [0.0; 3], width: 64, image_height: 64 }
    }
}

/// Cameras at azimuths `2πv/V`, starting in front (+z) of `look_at`.
pub fn make_orbit_rig(spec: &RigSpec) -> Result<Vec<CameraView>> {
    if spec.num_views == 0 {
        return Err(invalid("orbit rig needs at least one view"));
    }
    if !(spec.radius > 0.0) || !spec.radius.is_finite() {
        return Err(invalid(format!("orbit radius {} must be positive", spec.radius)));
    }
    if !(spec.height.abs() < spec.radius) {
        return Err(invalid(format!("camera height {} must be smaller than the radius {}", spec.height, spec.radius)));
    }
    let k = CameraView::intrinsics_from_fov(spec.fov_deg, spec.width, spec.image_height)?;
    let target = Vec3::from(spec.look_at);
    let ring = (spec.radius * spec.radius - spec.height * spec.height).sqrt();
    (0..spec.num_views)
        .map(|v| {
            let theta = 2.0 * std::f64::consts::PI * v as f64 / spec.num_views as f64;
            let eye = target + Vec3::new(ring * theta.sin(), spec.height, ring * theta.cos());
            CameraView::look_at(eye, target, Vec3::y(), k, spec.width, spec.image_height)
        })
        .collect()
}

/// One rigid part and its motion over normalized time `s ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidGroup {
    pub members: Vec<usize>,
    pub pivot: [f64; 3],
    pub axis: [f64; 3],
    /// Swing angle is `amplitude · sin(2π·cycles·s + phase)` radians.
    pub swing_amplitude: f64,
    pub swing_cycles: f64,
    pub swing_phase: f64,
    /// Catmull-Rom knots, evenly spaced over `[0, 1]`; empty means no translation.
    pub translation_knots: Vec<[f64; 3]>,
}

impl RigidGroup {
    pub fn swing_angle(&self, s: f64) -> f64 {
        self.swing_amplitude * (2.0 * std::f64::consts::PI * self.swing_cycles * s + self.swing_phase).sin()
    }

    pub fn translation(&self, s: f64) -> Vec3 {
        catmull_rom(&self.translation_knots, s)
    }

    /// Rotation and translation such that `p ↦ R p + t`.
    pub fn transform(&self, s: f64) -> Result<(Quat, Vec3)> {
        let axis = Vec3::from(self.axis);
        let q = if self.swing_amplitude == 0.0 {
            Quat::IDENTITY
        } else {
            let axis = axis.try_normalize(1e-12).ok_or_else(|| invalid("swing axis must be nonzero"))?;
            Quat::from_axis_angle(axis, self.swing_angle(s))
        };
        let r = crate::numerics::quat_to_rotation(q)?;
        let pivot = Vec3::from(self.pivot);
        Ok((q, pivot - r * pivot + self.translation(s)))
    }
}

fn catmull_rom(knots: &[[f64; 3]], s: f64) -> Vec3 {
    match knots.len() {
        0 => return Vec3::zeros(),
        1 => return Vec3::from(knots[0]),
        _ => {}
    }
    let n = knots.len();
    let u = s.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (u.floor() as usize).min(n - 2);
    let t = u - i as f64;
    let k = |j: isize| Vec3::from(knots[j.clamp(0, n as isize - 1) as usize]);
    let (p0, p1, p2, p3) = (k(i as isize - 1), k(i as isize), k(i as isize + 1), k(i as isize + 2));
    0.5 * (2.0 * p1
        + (p2 - p0) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * (t * t)
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * (t * t * t))
}

/// Extra displacement applied to some Gaussians at a single frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierEvent {
    pub members: Vec<usize>,
    pub frame: usize,
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionScript {
    pub groups: Vec<RigidGroup>,
    #[serde(default)]
    pub outliers: Vec<OutlierEvent>,
}

impl MotionScript {
    /// Checks that the groups partition `0..n` and outliers index valid Gaussians.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (g, group) in self.groups.iter().enumerate() {
            for &m in &group.members {
                if m >= n {
                    return Err(invalid(format!("group {g} member {m} out of range for {n} Gaussians")));
                }
                if std::mem::replace(&mut seen[m], true) {
                    return Err(invalid(format!("Gaussian {m} belongs to more than one group")));
                }
            }
        }
        if let Some(m) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("Gaussian {m} belongs to no group")));
        }
        for ev in &self.outliers {
            if let Some(&m) = ev.members.iter().find(|&&m| m >= n) {
                return Err(invalid(format!("outlier member {m} out of range for {n} Gaussians")));
            }
        }
        Ok(())
    }

    /// The cloud at frame `frame` of a `num_frames`-frame sequence.
    pub fn pose(&self, cloud: &GaussianCloud, frame: usize, num_frames: usize) -> Result<GaussianCloud> {
        self.validate(cloud.len())?;
        let s = normalized_time(frame as f64, num_frames);
        let mut out = cloud.clone();
        for group in &self.groups {
            let (q, t) = group.transform(s)?;
            let r = crate::numerics::quat_to_rotation(q)?;
            for &m in &group.members {
                let p = r * Vec3::from(cloud.positions[m]) + t;
                out.positions[m] = [p.x, p.y, p.z];
                out.rotations[m] = q.mul(Quat::from_array(cloud.rotations[m])).to_array();
            }
        }
        for ev in self.outliers.iter().filter(|e| e.frame == frame) {
            for &m in &ev.members {
                for a in 0..3 {
                    out.positions[m][a] += ev.offset[a];
                }
            }
        }
        Ok(out)
    }
}

/// Parameters of the procedural torso-and-limbs scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_gaussians: usize,
    pub num_groups: usize,
    pub seed: u64,
    /// Scales every swing amplitude and translation; 0 gives a static scene.
    pub motion_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { num_gaussians: 200, num_groups: 3, seed: 0, motion_scale: 1.0 }
    }
}

const GROUP_COLORS: [[f64; 3]; 6] =
    [[0.85, 0.55, 0.35], [0.25, 0.45, 0.85], [0.35, 0.75, 0.35], [0.85, 0.3, 0.4], [0.7, 0.6, 0.2], [0.55, 0.35, 0.75]];

/// Group 0 is a static torso blob; every further group is a limb hinged on
/// the torso surface that swings and drifts over the sequence.
pub fn make_articulated_scene(config: &SceneConfig) -> Result<(GaussianCloud, MotionScript)> {
    let (n, groups) = (config.num_gaussians, config.num_groups);
    if groups == 0 || groups > n {
        return Err(invalid(format!("need 1 ≤ groups ≤ Gaussians, got {groups} groups for {n} Gaussians")));
    }
    if !config.motion_scale.is_finite() {
        return Err(invalid("motion scale must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let limbs = groups - 1;
    let torso_count = if limbs == 0 { n } else { (n * 2 / 5).max(1).min(n - limbs) };
    let mut cloud = GaussianCloud::with_capacity(n);
    let mut script = MotionScript { groups: Vec::with_capacity(groups), outliers: Vec::new() };

    let push_point = |cloud: &mut GaussianCloud, rng: &mut ChaCha8Rng, p: Vec3, base: [f64; 3], size: f64| {
        let q = Quat::new(unit.sample(rng), unit.sample(rng), unit.sample(rng), unit.sample(rng)).normalize().unwrap_or(Quat::IDENTITY);
        let s = |rng: &mut ChaCha8Rng| (size * rng.gen_range(0.7..1.3)).ln();
        let log_scale = [s(rng), s(rng), s(rng)];
        let color = std::array::from_fn(|c| (base[c] + rng.gen_range(-0.12..0.12)).clamp(0.02, 0.98));
        cloud.push(Gaussian {
            position: [p.x, p.y, p.z],
            rotation: q.to_array(),
            log_scale,
            opacity_logit: logit(rng.gen_range(0.75..0.95)),
            color,
        });
    };

    let torso_radii = Vec3::new(0.22, 0.32, 0.16);
    for _ in 0..torso_count {
        let d = Vec3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng));
        let r = rng.gen::<f64>().cbrt();
        let p = d.normalize().component_mul(&torso_radii) * r;
        push_point(&mut cloud, &mut rng, p, GROUP_COLORS[0], 0.05);
    }
    script.groups.push(RigidGroup {
        members: (0..torso_count).collect(),
        pivot: [0.0; 3],
        axis: [0.0, 0.0, 1.0],
        swing_amplitude: 0.0,
        swing_cycles: 0.0,
        swing_phase: 0.0,
        translation_knots: Vec::new(),
    });

    let mut start = torso_count;
    for l in 0..limbs {
        let count = (n - torso_count) / limbs + usize::from(l < (n - torso_count) % limbs);
        // Limbs fan out around the torso in the image plane of the front view.
        let angle = -std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * (l as f64 + 0.5) / limbs as f64;
        let dir = Vec3::new(angle.cos(), angle.sin(), 0.0);
        let pivot = dir.component_mul(&Vec3::new(torso_radii.x, torso_radii.y, 0.0));
        let length = 0.45;
        for _ in 0..count {
            let along = rng.gen_range(0.05..1.0) * length;
            let jitter = Vec3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)) * 0.035;
            push_point(&mut cloud, &mut rng, pivot + dir * along + jitter, GROUP_COLORS[1 + l % 5], 0.04);
        }
        let m = config.motion_scale;
        let drift = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 0.06 * m;
        script.groups.push(RigidGroup {
            members: (start..start + count).collect(),
            pivot: [pivot.x, pivot.y, pivot.z],
            axis: [0.0, 0.0, 1.0],
            swing_amplitude: 0.3 * m,
            swing_cycles: 0.5,
            swing_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            translation_knots: vec![[0.0; 3], [drift.x, drift.y, drift.z], [0.0; 3]],
        });
        start += count;
    }
    Ok((cloud, script))
}

/// The `count` members of `group` nearest to its point farthest from the pivot.
pub fn cluster_near_tip(cloud: &GaussianCloud, script: &MotionScript, group: usize, count: usize) -> Result<Vec<usize>> {
    let g = script.groups.get(group).ok_or_else(|| invalid(format!("no group {group}")))?;
    let pivot = Vec3::from(g.pivot);
    let tip = *g
        .members
        .iter()
        .max_by(|&&a, &&b| {
            let da = (cloud.position(a) - pivot).norm();
            let db = (cloud.position(b) - pivot).norm();
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .ok_or_else(|| invalid(format!("group {group} is empty")))?;
    let mut members = g.members.clone();
    members.sort_by(|&a, &b| {
        let da = (cloud.position(a) - cloud.position(tip)).norm();
        let db = (cloud.position(b) - cloud.position(tip)).norm();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    members.truncate(count);
    members.sort_unstable();
    Ok(members)
}

/// Median over Gaussians and consecutive frame pairs of the ground-truth
/// inter-frame displacement.
pub fn median_displacement(cloud: &GaussianCloud, script: &MotionScript, num_frames: usize) -> Result<f64> {
    let mut d = Vec::new();
    let mut prev = script.pose(cloud, 0, num_frames)?;
    for t in 1..num_frames {
        let cur = script.pose(cloud, t, num_frames)?;
        d.extend((0..cloud.len()).map(|i| (cur.position(i) - prev.position(i)).norm()));
        prev = cur;
    }
    if d.is_empty() {
        return Ok(0.0);
    }
    d.sort_by(f64::total_cmp);
    Ok(d[d.len() / 2])
}

/// Images of a scene over `views × frames`, with the cameras that took them.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSequence {
    pub cameras: Vec<CameraView>,
    /// `frames[view][frame]`.
    pub frames: Vec<Vec<Image>>,
    pub background: [f64; 3],
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub cameras: Vec<CameraView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceMeta {
    num_views: usize,
    num_frames: usize,
    width: usize,
    height: usize,
    background: [f64; 3],
    fps: f64,
}

pub const RIG_FILE: &str = "rig.json";
pub const SEQUENCE_FILE: &str = "sequence.json";

impl MultiViewSequence {
    pub fn new(cameras: Vec<CameraView>, frames: Vec<Vec<Image>>, background: [f64; 3], fps: f64) -> Result<Self> {
        if cameras.is_empty() || frames.len() != cameras.len() {
            return Err(invalid(format!("{} cameras for {} image streams", cameras.len(), frames.len())));
        }
        let t = frames[0].len();
        if t == 0 {
            return Err(invalid("sequence needs at least one frame"));
        }
        let (w, h) = (cameras[0].width, cameras[0].height);
        for (v, (cam, stream)) in cameras.iter().zip(&frames).enumerate() {
            if stream.len() != t {
                return Err(invalid(format!("view {v} has {} frames, view 0 has {t}", stream.len())));
            }
            if cam.width != w || cam.height != h || stream.iter().any(|im| im.width != w || im.height != h) {
                return Err(invalid(format!("view {v} image size differs from {w}x{h}")));
            }
        }
        Ok(MultiViewSequence { cameras, frames, background, fps })
    }

    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames[0].len()
    }

    pub fn image(&self, view: usize, frame: usize) -> &Image {
        &self.frames[view][frame]
    }

    /// Keeps only the listed views, in the given order.
    pub fn select_views(&self, views: &[usize]) -> Result<Self> {
        if let Some(&v) = views.iter().find(|&&v| v >= self.num_views()) {
            return Err(invalid(format!("view {v} out of range for {} views", self.num_views())));
        }
        MultiViewSequence::new(
            views.iter().map(|&v| self.cameras[v].clone()).collect(),
            views.iter().map(|&v| self.frames[v].clone()).collect(),
            self.background,
            self.fps,
        )
    }

    /// Writes `rig.json`, `sequence.json` and `view_VV/frame_TTT.png`; with
    /// `with_f32`, also lossless `.f32` dumps next to each PNG.
    pub fn save(&self, dir: &Path, with_f32: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RIG_FILE), serde_json::to_string_pretty(&RigFile { cameras: self.cameras.clone() })?)?;
        let meta = SequenceMeta {
            num_views: self.num_views(),
            num_frames: self.num_frames(),
            width: self.cameras[0].width,
            height: self.cameras[0].height,
            background: self.background,
            fps: self.fps,
        };
        fs::write(dir.join(SEQUENCE_FILE), serde_json::to_string_pretty(&meta)?)?;
        for (v, stream) in self.frames.iter().enumerate() {
            for (t, img) in stream.iter().enumerate() {
                img.save_png(&dir.join(frame_relpath(v, t, "png")))?;
                if with_f32 {
                    img.save_f32(&dir.join(frame_relpath(v, t, "f32")))?;
                }
            }
        }
        Ok(())
    }

    /// Loads a saved sequence, preferring `.f32` dumps over PNGs. Every
    /// missing frame is listed in the error.
    pub fn load(dir: &Path) -> Result<Self> {
        let rig: RigFile = serde_json::from_slice(&fs::read(dir.join(RIG_FILE))?)?;
        let meta: SequenceMeta = serde_json::from_slice(&fs::read(dir.join(SEQUENCE_FILE))?)?;
        if rig.cameras.len() != meta.num_views {
            return Err(invalid(format!("rig has {} cameras, sequence declares {} views", rig.cameras.len(), meta.num_views)));
        }
        let mut missing = Vec::new();
        let mut frames = Vec::with_capacity(meta.num_views);
        for v in 0..meta.num_views {
            let mut stream = Vec::with_capacity(meta.num_frames);
            for t in 0..meta.num_frames {
                let raw = dir.join(frame_relpath(v, t, "f32"));
                let png = dir.join(frame_relpath(v, t, "png"));
                if raw.exists() {
                    stream.push(Image::load_f32(&raw)?);
                } else if png.exists() {
                    stream.push(Image::load_png(&png)?);
                } else {
                    missing.push(frame_relpath(v, t, "png"));
                }
            }
            frames.push(stream);
        }
        if !missing.is_empty() {
            return Err(Error::Format { what: "sequence", detail: format!("missing frames: {}", missing.join(", ")) });
        }
        MultiViewSequence::new(rig.cameras, frames, meta.background, meta.fps)
    }
}

/// Renders every view of the scripted scene at frames `0..num_frames`.
pub fn render_ground_truth(
    cloud: &GaussianCloud,
    script: &MotionScript,
    cameras: &[CameraView],
    num_frames: usize,
    background: [f64; 3],
) -> Result<MultiViewSequence> {
    if num_frames == 0 {
        return Err(invalid("ground truth needs at least one frame"));
    }
    let posed: Vec<GaussianCloud> = (0..num_frames).map(|t| script.pose(cloud, t, num_frames)).collect::<Result<_>>()?;
    let options = RenderOptions::with_background(background);
    let frames = cameras
        .iter()
        .map(|cam| posed.iter().map(|c| Ok(render(c, cam, &options)?.color)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    MultiViewSequence::new(cameras.to_vec(), frames, background, 24.0)
}

/// Everything `gen-scene` needs: scene, rig, sequence length and extras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub scene: SceneConfig,
    pub rig: RigSpec,
    pub num_frames: usize,
    pub background: [f64; 3],
    pub outliers: Vec<OutlierEvent>,
    /// Also write lossless `.f32` frame dumps.
    pub write_f32: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            scene: SceneConfig::default(),
            rig: RigSpec::default(),
            num_frames: 8,
            background: [0.0; 3],
            outliers: Vec::new(),
            write_f32: true,
        }
    }
}

impl SceneSpec {
    pub fn build(&self) -> Result<(GaussianCloud, MotionScript, Vec<CameraView>)> {
        if self.num_frames == 0 {
            return Err(invalid("num_frames must be at least 1"));
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(invalid("background must be finite"));
        }
        let (cloud, mut script) = make_articulated_scene(&self.scene)?;
        script.outliers = self.outliers.clone();
        script.validate(cloud.len())?;
        if let Some(ev) = script.outliers.iter().find(|e| e.frame >= self.num_frames) {
            return Err(invalid(format!("outlier frame {} outside the {}-frame sequence", ev.frame, self.num_frames)));
        }
        Ok((cloud, script, make_orbit_rig(&self.rig)?))
    }
}
