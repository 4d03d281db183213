//! Coarse-to-fine fitting of a deformable Gaussian cloud to a multi-view
//! sequence.
//!
//! The coarse stage fits the canonical cloud alone to the middle frame
//! `⌊T/2⌋` with L1. The fine stage then grows a frame window around that
//! anchor by one frame per side per step, and at every iteration samples a
//! (view, frame) pair from the window and optimizes cloud and deformation
//! field jointly under the full objective.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::buffer::Image;
use crate::deform::{deform_backward_accumulate, deform_cloud, deform_cloud_tape, normalized_time, Checkpoint, DeformationField, FieldConfig, SceneBounds};
use crate::error::{invalid, Error, Result};
use crate::gaussians::{Gaussian, GaussianCloud};
use crate::knn::k_nearest;
use crate::losses::{build_neighbor_graph, l1_grad, l1_loss, sample_loss_grad, tv_loss_grad_accumulate, Gate, LossComponents, LossWeights, NeighborGraph, NeighborInputs};
use crate::metrics::{psnr, ssim, MetricReport, PairMetrics};
use crate::numerics::{quat_to_rotation, Quat, Vec3};
use crate::rasterizer::{render, render_backward, RenderOptions};
use crate::scenegen::MultiViewSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments of one parameter group, with its own step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: &'static str,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub groups: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, groups: &[(&'static str, &[f64])]) -> Self {
        let groups = groups
            .iter()
            .map(|(name, p)| Moments { name, m: vec![0.0; p.len()], v: vec![0.0; p.len()], step: 0 })
            .collect();
        Adam { config, groups }
    }

    /// One bias-corrected Adam update per group. Every gradient is checked
    /// before any parameter changes; a non-finite entry names its group.
    pub fn step(&mut self, params: &mut [(&'static str, &mut [f64])], grads: &[&[f64]], lr: f64) -> Result<()> {
        let shapes: Vec<(&'static str, &[f64])> = params.iter().map(|(n, p)| (*n, &**p)).collect();
        self.validate(&shapes, grads)?;
        self.apply(params, grads, lr);
        Ok(())
    }

    /// Checks that `params` and `grads` match the moment groups and that
    /// every gradient entry is finite.
    pub fn validate(&self, params: &[(&'static str, &[f64])], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.groups.len() || grads.len() != self.groups.len() {
            return Err(invalid(format!("{} parameter groups, {} gradients, {} moment groups", params.len(), grads.len(), self.groups.len())));
        }
        for ((name, p), (g, mom)) in params.iter().zip(grads.iter().zip(&self.groups)) {
            if *name != mom.name || p.len() != g.len() || p.len() != mom.m.len() {
                return Err(invalid(format!(
                    "group {name}: {} parameters, {} gradients, {} moments for {}",
                    p.len(),
                    g.len(),
                    mom.m.len(),
                    mom.name
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { group: name.to_string() });
            }
        }
        Ok(())
    }

    /// The update of [`Adam::step`] without checks; call [`Adam::validate`] first.
    pub fn apply(&mut self, params: &mut [(&'static str, &mut [f64])], grads: &[&[f64]], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for ((_, p), (g, mom)) in params.iter_mut().zip(grads.iter().zip(self.groups.iter_mut())) {
            mom.step += 1;
            let c1 = 1.0 - beta1.powi(mom.step as i32);
            let c2 = 1.0 - beta2.powi(mom.step as i32);
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// How the neighbor-loss displacement threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TauPolicy {
    /// `factor ×` the median inter-frame displacement over the fitted
    /// window, recomputed at the start of every progressive step.
    Adaptive { factor: f64 },
    /// Fixed threshold in world units.
    Absolute { value: f64 },
}

impl Default for TauPolicy {
    fn default() -> Self {
        TauPolicy::Adaptive { factor: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub enabled: bool,
    /// Iterations between densify passes.
    pub interval: usize,
    /// Mean world-space position-gradient norm above which a Gaussian is cloned or split.
    pub grad_threshold: f64,
    /// Gaussians whose largest scale exceeds this are split instead of cloned.
    pub split_scale: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig { enabled: false, interval: 500, grad_threshold: 2e-4, split_scale: 0.08, prune_opacity: 0.005, max_gaussians: 5000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub coarse_iters: usize,
    pub fine_iters_per_step: usize,
    pub k_neighbors: usize,
    pub weights: LossWeights,
    pub tau: TauPolicy,
    /// `false` removes the binary gate from the neighbor loss.
    pub neighbor_gate: bool,
    pub densify: DensifyConfig,
    pub seed: u64,
    /// (view, frame) samples per iteration.
    pub batch: usize,
    pub adam: AdamConfig,
    pub field: FieldConfig,
    /// Grid box padding around the initial cloud, as a fraction of its extent.
    pub bounds_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.6e-4,
            coarse_iters: 3000,
            fine_iters_per_step: 3000,
            k_neighbors: crate::losses::DEFAULT_K,
            weights: LossWeights::default(),
            tau: TauPolicy::default(),
            neighbor_gate: true,
            densify: DensifyConfig::default(),
            seed: 0,
            batch: 1,
            adam: AdamConfig::default(),
            field: FieldConfig::default(),
            bounds_margin: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.coarse_iters == 0 || self.fine_iters_per_step == 0 || self.batch == 0 || self.k_neighbors == 0 {
            return Err(invalid("coarse_iters, fine_iters_per_step, batch and k_neighbors must be positive"));
        }
        self.weights.validate()?;
        match self.tau {
            TauPolicy::Adaptive { factor } if !(factor >= 0.0 && factor.is_finite()) => {
                return Err(invalid(format!("tau factor {factor} must be nonnegative")))
            }
            TauPolicy::Absolute { value } if !(value >= 0.0) => return Err(invalid(format!("tau {value} must be nonnegative"))),
            _ => {}
        }
        if self.densify.enabled && self.densify.interval == 0 {
            return Err(invalid("densify interval must be positive"));
        }
        if !(self.bounds_margin >= 0.0 && self.bounds_margin.is_finite()) {
            return Err(invalid("bounds_margin must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    Fine,
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub stage: Stage,
    /// Progressive step (0 during the coarse stage).
    pub step: usize,
    pub iteration: u64,
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub tv: f64,
    pub neighbor: f64,
    pub active_gate_fraction: f64,
    /// Neighbor threshold; `None` when infinite or unused.
    pub tau: Option<f64>,
    pub views: Vec<usize>,
    pub frames: Vec<usize>,
    pub num_gaussians: usize,
}

/// Index of the frame the fit is anchored on.
pub fn anchor_frame(num_frames: usize) -> usize {
    num_frames / 2
}

/// Number of progressive steps until the window covers every frame.
pub fn num_fine_steps(num_frames: usize) -> usize {
    let a = anchor_frame(num_frames);
    1 + a.max(num_frames.saturating_sub(1) - a)
}

/// Inclusive frame window of progressive step `step`.
pub fn window_at(num_frames: usize, step: usize) -> (usize, usize) {
    let a = anchor_frame(num_frames);
    (a.saturating_sub(step), (a + step).min(num_frames.saturating_sub(1)))
}

/// Frame whose positions a frame's neighbor term compares against: the
/// adjacent frame on the anchor side, or the frame itself at the anchor.
pub fn reference_frame(frame: usize, anchor: usize) -> usize {
    use std::cmp::Ordering::*;
    match frame.cmp(&anchor) {
        Greater => frame - 1,
        Less => frame + 1,
        Equal => frame,
    }
}

#[derive(Clone, Debug)]
pub struct FitState {
    pub cloud: GaussianCloud,
    pub field: DeformationField,
    pub num_frames: usize,
    pub cloud_adam: Adam,
    pub field_adam: Adam,
    pub window: (usize, usize),
    pub iteration: u64,
    pub fine_steps_done: usize,
    pub rng: ChaCha8Rng,
    graph: Option<NeighborGraph>,
    /// Frozen neighbor-term reference positions, keyed by frame.
    references: BTreeMap<usize, Vec<[f64; 3]>>,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
}

impl FitState {
    /// Fresh state around `cloud`; the field box is the cloud's bounding box
    /// padded by `config.bounds_margin`.
    pub fn new(cloud: GaussianCloud, num_frames: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        cloud.validate()?;
        if num_frames == 0 || cloud.is_empty() {
            return Err(invalid("fitting needs at least one frame and one Gaussian"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bounds = SceneBounds::around(&cloud.positions, config.bounds_margin)?;
        let field = DeformationField::new(config.field, bounds, &mut rng)?;
        let cloud_adam = Adam::new(config.adam, &cloud.groups());
        let field_adam = Adam::new(config.adam, &field.groups());
        let anchor = anchor_frame(num_frames);
        let n = cloud.len();
        Ok(FitState {
            cloud,
            field,
            num_frames,
            cloud_adam,
            field_adam,
            window: (anchor, anchor),
            iteration: 0,
            fine_steps_done: 0,
            rng,
            graph: None,
            references: BTreeMap::new(),
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { canonical: self.cloud.clone(), field: self.field.clone(), num_frames: self.num_frames }
    }

    /// The fitted cloud at (possibly fractional) frame index `frame`.
    pub fn posed(&self, frame: f64) -> Result<GaussianCloud> {
        Ok(deform_cloud(&self.field, &self.cloud, normalized_time(frame, self.num_frames))?.cloud)
    }

    fn check_sequence(&self, seq: &MultiViewSequence) -> Result<()> {
        if seq.num_frames() != self.num_frames {
            return Err(invalid(format!("state expects {} frames, sequence has {}", self.num_frames, seq.num_frames())));
        }
        Ok(())
    }

    fn record_position_grads(&mut self, d_positions: &[[f64; 3]]) {
        for (i, g) in d_positions.iter().enumerate() {
            self.grad_accum[i] += (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            self.grad_count[i] += 1;
        }
    }

    fn maybe_densify(&mut self, config: &TrainConfig) -> Result<()> {
        if config.densify.enabled && self.iteration.is_multiple_of(config.densify.interval as u64) {
            densify_and_prune(self, &config.densify)?;
        }
        Ok(())
    }
}

fn check_total(c: &LossComponents) -> Result<()> {
    if !c.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {c:?}")));
    }
    Ok(())
}

/// Static fit of the canonical cloud to the anchor frame with L1. The
/// deformation field is not touched.
pub fn coarse_fit(
    state: &mut FitState,
    seq: &MultiViewSequence,
    config: &TrainConfig,
    log: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    state.check_sequence(seq)?;
    let frame = anchor_frame(state.num_frames);
    let options = RenderOptions::with_background(seq.background);
    for _ in 0..config.coarse_iters {
        let views: Vec<usize> = (0..config.batch).map(|_| state.rng.gen_range(0..seq.num_views())).collect();
        let inv = 1.0 / views.len() as f64;
        let mut grads = state.cloud.zeros_like();
        let mut l1 = 0.0;
        for &v in &views {
            let cam = &seq.cameras[v];
            let target = render(&state.cloud, cam, &options)?;
            let gt = seq.image(v, frame);
            l1 += inv * l1_loss(&target.color, gt)?;
            let mut d_img = l1_grad(&target.color, gt)?;
            d_img.data.iter_mut().for_each(|x| *x *= inv);
            grads.add_assign(&render_backward(&state.cloud, cam, &target, &d_img)?);
        }
        let c = LossComponents { total: l1, l1, ..Default::default() };
        check_total(&c)?;
        let grad_refs: Vec<&[f64]> = grads.groups().iter().map(|(_, g)| *g).collect();
        state.cloud_adam.step(&mut state.cloud.groups_mut(), &grad_refs, config.learning_rate)?;
        state.record_position_grads(&grads.positions);
        state.iteration += 1;
        log(&IterationLog {
            stage: Stage::Coarse,
            step: 0,
            iteration: state.iteration,
            total: c.total,
            l1,
            dssim: 0.0,
            tv: 0.0,
            neighbor: 0.0,
            active_gate_fraction: 0.0,
            tau: None,
            views,
            frames: vec![frame],
            num_gaussians: state.cloud.len(),
        });
        state.maybe_densify(config)?;
    }
    Ok(())
}

/// Positions of every frame in `window` under the current model.
fn snapshot_positions(state: &FitState, window: (usize, usize)) -> Result<BTreeMap<usize, Vec<[f64; 3]>>> {
    (window.0..=window.1).map(|t| Ok((t, state.posed(t as f64)?.positions))).collect()
}

/// Median of `‖u^t − u^{ref(t)}‖` over the snapshot (anchor excluded);
/// `None` when it holds no frame pairs.
fn median_snapshot_displacement(snapshot: &BTreeMap<usize, Vec<[f64; 3]>>, anchor: usize) -> Option<f64> {
    let mut d = Vec::new();
    for (&t, u) in snapshot {
        let r = reference_frame(t, anchor);
        if let (true, Some(v)) = (r != t, snapshot.get(&r)) {
            d.extend(u.iter().zip(v).map(|(a, b)| (Vec3::from(*a) - Vec3::from(*b)).norm()));
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Runs every progressive step. Each step widens the window by one frame
/// per side (from the anchor alone up to all frames), rebuilds the neighbor
/// graph from canonical positions, and runs `fine_iters_per_step`
/// iterations.
///
/// The neighbor term compares each frame against its reference frame as
/// fitted before the step began. Those positions are frozen for the step,
/// as is an adaptive τ measured on them: frames the field has not seen yet
/// barely move and would drag the median toward zero, and a reference that
/// moves with the parameters lets the canonical cloud drift without bound.
pub fn progressive_fine_fit(
    state: &mut FitState,
    seq: &MultiViewSequence,
    config: &TrainConfig,
    log: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    state.check_sequence(seq)?;
    for step in state.fine_steps_done..num_fine_steps(state.num_frames) {
        fine_step(state, seq, config, step, log)?;
    }
    Ok(())
}

/// One progressive step.
pub fn fine_step(
    state: &mut FitState,
    seq: &MultiViewSequence,
    config: &TrainConfig,
    step: usize,
    log: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    state.check_sequence(seq)?;
    let new_window = window_at(state.num_frames, step);
    if new_window.0 > state.window.0 || new_window.1 < state.window.1 {
        return Err(invalid(format!("progressive window cannot shrink from {:?} to {new_window:?}", state.window)));
    }
    let snapshot = snapshot_positions(state, state.window)?;
    let tau = match config.tau {
        TauPolicy::Absolute { value } => value,
        TauPolicy::Adaptive { factor } => {
            median_snapshot_displacement(&snapshot, anchor_frame(state.num_frames)).map_or(f64::INFINITY, |m| factor * m)
        }
    };
    state.window = new_window;
    state.graph = None;
    state.references = snapshot;
    for _ in 0..config.fine_iters_per_step {
        fine_iteration(state, seq, config, step, tau, log)?;
        state.maybe_densify(config)?;
    }
    state.fine_steps_done = step + 1;
    Ok(())
}

fn fine_iteration(
    state: &mut FitState,
    seq: &MultiViewSequence,
    config: &TrainConfig,
    step: usize,
    tau: f64,
    log: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    if state.graph.is_none() && state.cloud.len() >= 2 {
        state.graph = Some(build_neighbor_graph(&state.cloud.positions, config.k_neighbors)?);
    }
    let (lo, hi) = state.window;
    let anchor = anchor_frame(state.num_frames);
    let gate = if config.neighbor_gate { Gate::Threshold(tau) } else { Gate::AlwaysOpen };
    let options = RenderOptions::with_background(seq.background);
    let inv = 1.0 / config.batch as f64;

    let mut field_grads = state.field.zero_gradients();
    let mut cloud_grads = state.cloud.zeros_like();
    let mut comps = LossComponents::default();
    let mut views = Vec::with_capacity(config.batch);
    let mut frames = Vec::with_capacity(config.batch);
    // The grid regularizer does not depend on the sample; it is added once below.
    for _ in 0..config.batch {
        let v = state.rng.gen_range(0..seq.num_views());
        let t = state.rng.gen_range(lo..=hi);
        views.push(v);
        frames.push(t);
        let (posed, tape) = deform_cloud_tape(&state.field, &state.cloud, normalized_time(t as f64, state.num_frames))?;
        let r = reference_frame(t, anchor);
        let u_prev = match state.references.get(&r) {
            Some(u) if r != t => u.as_slice(),
            _ => posed.cloud.positions.as_slice(),
        };
        let cam = &seq.cameras[v];
        let target = render(&posed.cloud, cam, &options)?;
        let gt = seq.image(v, t);
        let neighbor = state.graph.as_ref().map(|graph| NeighborInputs { graph, u_prev, u_curr: &posed.cloud.positions, gate });
        let (c, g) = sample_loss_grad(std::slice::from_ref(&target.color), std::slice::from_ref(gt), neighbor.as_ref(), &config.weights)?;
        check_total(&c)?;
        let mut d_posed = render_backward(&posed.cloud, cam, &target, &g.images[0])?;
        if let Some(du) = &g.u_curr {
            for (d, u) in d_posed.positions.iter_mut().zip(du) {
                for a in 0..3 {
                    d[a] += u[a];
                }
            }
        }
        if config.batch > 1 {
            for (_, grp) in d_posed.groups_mut() {
                grp.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let dc = deform_backward_accumulate(&state.field, &tape, &d_posed, &mut field_grads)?;
        cloud_grads.add_assign(&dc);
        comps.total += inv * c.total;
        comps.l1 += inv * c.l1;
        comps.dssim += inv * c.dssim;
        comps.neighbor += inv * c.neighbor;
        comps.active_gate_fraction += inv * c.active_gate_fraction;
    }
    comps.tv = tv_loss_grad_accumulate(&state.field.grid, config.weights.tv, &mut field_grads.grid);
    comps.total += config.weights.tv * comps.tv;
    check_total(&comps)?;

    let cloud_refs: Vec<&[f64]> = cloud_grads.groups().iter().map(|(_, g)| *g).collect();
    let field_refs: Vec<&[f64]> = vec![
        &field_grads.grid,
        &field_grads.hidden.weights,
        &field_grads.hidden.biases,
        &field_grads.output.weights,
        &field_grads.output.biases,
    ];
    // Validate both before touching either so a failure leaves the state intact.
    state.cloud_adam.validate(&state.cloud.groups(), &cloud_refs)?;
    state.field_adam.validate(&state.field.groups(), &field_refs)?;
    state.cloud_adam.apply(&mut state.cloud.groups_mut(), &cloud_refs, config.learning_rate);
    state.field_adam.apply(&mut state.field.groups_mut(), &field_refs, config.learning_rate);
    state.record_position_grads(&cloud_grads.positions);
    state.iteration += 1;
    log(&IterationLog {
        stage: Stage::Fine,
        step,
        iteration: state.iteration,
        total: comps.total,
        l1: comps.l1,
        dssim: comps.dssim,
        tv: comps.tv,
        neighbor: comps.neighbor,
        active_gate_fraction: comps.active_gate_fraction,
        tau: tau.is_finite().then_some(tau),
        views,
        frames,
        num_gaussians: state.cloud.len(),
    });
    Ok(())
}

/// Clones small Gaussians and splits large ones whose mean position-gradient
/// norm since the last pass reaches `grad_threshold`, then prunes those with
/// opacity below `prune_opacity`. New Gaussians start with zero Adam
/// moments; survivors keep theirs. Returns the number of Gaussians after the pass.
pub fn densify_and_prune(state: &mut FitState, config: &DensifyConfig) -> Result<usize> {
    let n = state.cloud.len();
    let unit = Normal::new(0.0, 1.0).unwrap();
    // origin[k] = Some(i) keeps Gaussian i's moments; None starts fresh.
    let mut origin: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut out = GaussianCloud::with_capacity(n);
    let mut room = config.max_gaussians.saturating_sub(n);
    for i in 0..n {
        let g = state.cloud.get(i);
        let mean_grad = if state.grad_count[i] == 0 { 0.0 } else { state.grad_accum[i] / state.grad_count[i] as f64 };
        let max_scale = g.log_scale.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
        if mean_grad >= config.grad_threshold && room > 0 {
            room -= 1;
            if max_scale > config.split_scale {
                let r = quat_to_rotation(Quat::from_array(g.rotation))?;
                let shrink = 1.6f64.ln();
                for keep in [true, false] {
                    let local = Vec3::new(
                        unit.sample(&mut state.rng) * g.log_scale[0].exp(),
                        unit.sample(&mut state.rng) * g.log_scale[1].exp(),
                        unit.sample(&mut state.rng) * g.log_scale[2].exp(),
                    );
                    let p = Vec3::from(g.position) + r * local;
                    out.push(Gaussian {
                        position: [p.x, p.y, p.z],
                        log_scale: g.log_scale.map(|s| s - shrink),
                        ..g
                    });
                    origin.push(keep.then_some(i));
                }
                continue;
            }
            out.push(g);
            origin.push(Some(i));
            out.push(g);
            origin.push(None);
            continue;
        }
        out.push(g);
        origin.push(Some(i));
    }
    let keep: Vec<bool> = (0..out.len()).map(|k| out.opacity(k) >= config.prune_opacity).collect();
    let out = out.retain_mask(&keep);
    let origin: Vec<Option<usize>> = origin.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(o, _)| o).collect();

    if out.len() != n || origin.iter().enumerate().any(|(k, o)| *o != Some(k)) {
        let strides = [3usize, 4, 3, 1, 3];
        for (mom, stride) in state.cloud_adam.groups.iter_mut().zip(strides) {
            let remap = |old: &[f64]| -> Vec<f64> {
                origin
                    .iter()
                    .flat_map(|o| match o {
                        Some(i) => old[i * stride..(i + 1) * stride].to_vec(),
                        None => vec![0.0; stride],
                    })
                    .collect()
            };
            mom.m = remap(&mom.m);
            mom.v = remap(&mom.v);
        }
        state.cloud = out;
        state.graph = None;
        if let (Some(&lo), Some(&hi)) = (state.references.keys().next(), state.references.keys().next_back()) {
            state.references = snapshot_positions(state, (lo, hi))?;
        }
    }
    state.grad_accum = vec![0.0; state.cloud.len()];
    state.grad_count = vec![0; state.cloud.len()];
    Ok(state.cloud.len())
}

/// Ground-truth cloud with Gaussian noise of standard deviation `sigma`
/// added to every position.
pub fn perturbed_init(cloud: &GaussianCloud, sigma: f64, seed: u64) -> Result<GaussianCloud> {
    let noise = Normal::new(0.0, sigma).map_err(|e| invalid(format!("bad sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    for p in out.positions.iter_mut() {
        for v in p.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(out)
}

/// `n` gray, half-opaque, isotropic Gaussians uniform in the box, each with
/// scale half the mean nearest-neighbor distance.
pub fn cold_start_init(bounds: &SceneBounds, n: usize, seed: u64) -> Result<GaussianCloud> {
    if n < 2 {
        return Err(invalid("cold start needs at least two Gaussians"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 3]> =
        (0..n).map(|_| std::array::from_fn(|a| rng.gen_range(bounds.min[a]..bounds.max[a]))).collect();
    let nn = k_nearest(&positions, 1);
    let mean_nn = positions
        .iter()
        .zip(&nn)
        .map(|(p, j)| {
            let q = positions[j[0] as usize];
            (Vec3::from(*p) - Vec3::from(q)).norm()
        })
        .sum::<f64>()
        / n as f64;
    let log_scale = (0.5 * mean_nn).max(1e-6).ln();
    let mut cloud = GaussianCloud::with_capacity(n);
    for p in positions {
        cloud.push(Gaussian { position: p, rotation: [1.0, 0.0, 0.0, 0.0], log_scale: [log_scale; 3], opacity_logit: 0.0, color: [0.5; 3] });
    }
    Ok(cloud)
}

/// Renders every (view, frame) of `seq` from a checkpoint and scores it.
pub fn evaluate(checkpoint: &Checkpoint, seq: &MultiViewSequence) -> Result<MetricReport> {
    if checkpoint.num_frames != seq.num_frames() {
        return Err(invalid(format!("checkpoint has {} frames, sequence {}", checkpoint.num_frames, seq.num_frames())));
    }
    let options = RenderOptions::with_background(seq.background);
    let mut pairs = Vec::new();
    for t in 0..seq.num_frames() {
        let posed = checkpoint.pose_at_frame(t as f64)?;
        for (v, cam) in seq.cameras.iter().enumerate() {
            let img: Image = render(&posed, cam, &options)?.color;
            let gt = seq.image(v, t);
            pairs.push(PairMetrics { view: v, frame: t, psnr: psnr(&img, gt, 1.0)?, ssim: ssim(&img, gt)? });
        }
    }
    pairs.sort_by_key(|p| (p.view, p.frame));
    Ok(MetricReport::from_pairs(pairs))
}
