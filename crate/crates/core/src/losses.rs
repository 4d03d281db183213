//! Fine-stage objective: photometric L1 and D-SSIM, feature-grid total
//! variation, and the gated neighbor loss over a kNN graph.
//!
//! The neighbor loss compares each point's offset from the mean of its
//! neighbors between two frames,
//!
//! ```text
//! L_i^t = u_i^t − mean_{j∈N(i)} u_j^t
//! loss  = Σ_{i} Σ_{j∈N(i)} ‖L_i^t − L_i^{t−1}‖² · w_ij · m_i · m_j
//! ```
//!
//! with `w_ij = ‖u_i^{t−1} − u_j^{t−1}‖` and `m_i = [‖u_i^t − u_i^{t−1}‖ > τ]`.
//! Only `u^t` receives gradients; gates and weights are held constant.

use serde::{Deserialize, Serialize};

use crate::buffer::Image;
use crate::error::{invalid, Result};
use crate::knn::k_nearest;
use crate::metrics::ssim_and_grad;
use crate::numerics::FeatureGrid;

pub const DEFAULT_K: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub dssim: f64,
    pub neighbor: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, dssim: 0.01, neighbor: 1.0, tv: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("dssim", self.dssim), ("neighbor", self.neighbor), ("tv", self.tv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("loss weight {name} = {v} must be a nonnegative finite number")));
            }
        }
        Ok(())
    }
}

fn check_pair(pred: &Image, gt: &Image) -> Result<()> {
    pred.check_same_shape(gt).map_err(|e| invalid(e.to_string()))?;
    if pred.data.is_empty() {
        return Err(invalid("loss of an empty image"));
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels.
pub fn l1_loss(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.data.len() as f64)
}

/// Gradient of [`l1_loss`] w.r.t. `pred` (subgradient 0 where equal).
pub fn l1_grad(pred: &Image, gt: &Image) -> Result<Image> {
    check_pair(pred, gt)?;
    let n = pred.data.len() as f64;
    let data = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| if a > b { 1.0 / n } else if a < b { -1.0 / n } else { 0.0 })
        .collect();
    Image::from_data(pred.width, pred.height, data)
}

/// `(1 − SSIM)/2`.
pub fn dssim_loss(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok((1.0 - ssim_and_grad(pred, gt, false)?.0) / 2.0)
}

/// [`dssim_loss`] and its gradient w.r.t. `pred`.
pub fn dssim_loss_grad(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    check_pair(pred, gt)?;
    let (s, g) = ssim_and_grad(pred, gt, true)?;
    let mut g = g.unwrap();
    for v in g.data.iter_mut() {
        *v *= -0.5;
    }
    Ok(((1.0 - s) / 2.0, g))
}

fn tv_pairs(dims: [usize; 3]) -> usize {
    let [a, b, c] = dims;
    a.saturating_sub(1) * b * c + a * b.saturating_sub(1) * c + a * b * c.saturating_sub(1)
}

/// Mean of `‖g[c] − g[c + e_axis]‖²` over every adjacent cell pair along
/// every axis; 0 when the grid has no adjacent pairs.
pub fn tv_loss(grid: &FeatureGrid) -> f64 {
    tv_impl(grid, None)
}

/// Adds `scale · ∂tv_loss/∂grid` into `d_grid`.
pub fn tv_grad_accumulate(grid: &FeatureGrid, scale: f64, d_grid: &mut [f64]) {
    if scale != 0.0 {
        tv_impl(grid, Some((scale, d_grid)));
    }
}

/// `tv_loss` and, when requested, its scaled gradient in one sweep.
pub fn tv_loss_grad_accumulate(grid: &FeatureGrid, scale: f64, d_grid: &mut [f64]) -> f64 {
    tv_impl(grid, (scale != 0.0).then_some((scale, d_grid)))
}

// Pairs along any axis are offset by a fixed stride, so each (i, j) row of
// cells contributes two contiguous slices.
fn tv_impl(grid: &FeatureGrid, mut grad: Option<(f64, &mut [f64])>) -> f64 {
    let pairs = tv_pairs(grid.dims);
    if pairs == 0 {
        return 0.0;
    }
    let [nx, ny, nz] = grid.dims;
    let c = grid.channels;
    let strides = [ny * nz * c, nz * c, c];
    let k = grad.as_ref().map_or(0.0, |(s, _)| 2.0 * s / pairs as f64);
    let data = &grid.data;
    let mut total = 0.0;
    let mut diff = vec![0.0; nz * c];
    for (axis, &stride) in strides.iter().enumerate() {
        let len = if axis == 2 { (nz - 1) * c } else { nz * c };
        if len == 0 {
            continue;
        }
        let diff = &mut diff[..len];
        for i in 0..nx - usize::from(axis == 0) {
            for j in 0..ny - usize::from(axis == 1) {
                let row = grid.cell_offset(i, j, 0);
                for ((d, x), y) in diff.iter_mut().zip(&data[row..row + len]).zip(&data[row + stride..row + stride + len]) {
                    *d = x - y;
                }
                total += diff.iter().map(|d| d * d).sum::<f64>();
                if let Some((_, g)) = grad.as_mut() {
                    for (g, d) in g[row..row + len].iter_mut().zip(diff.iter()) {
                        *g += k * d;
                    }
                    for (g, d) in g[row + stride..row + stride + len].iter_mut().zip(diff.iter()) {
                        *g -= k * d;
                    }
                }
            }
        }
    }
    total / pairs as f64
}

/// Directed kNN edges `i → j` for `j ∈ N(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    /// `neighbors[i]` lists `N(i)`, nearest first.
    pub neighbors: Vec<Vec<u32>>,
    /// Edge lengths at build time, aligned with `neighbors`.
    pub weights: Vec<Vec<f64>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors.iter().enumerate().flat_map(|(i, n)| n.iter().map(move |&j| (i, j as usize)))
    }
}

/// Exact kNN graph with `k` clamped to `N − 1`; ties go to the lower index.
pub fn build_neighbor_graph(positions: &[[f64; 3]], k: usize) -> Result<NeighborGraph> {
    if positions.len() < 2 {
        return Err(invalid(format!("neighbor graph needs at least 2 points, got {}", positions.len())));
    }
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("neighbor graph positions must be finite"));
    }
    let neighbors = k_nearest(positions, k);
    let weights = neighbors
        .iter()
        .enumerate()
        .map(|(i, n)| n.iter().map(|&j| dist(positions[i], positions[j as usize])).collect())
        .collect();
    Ok(NeighborGraph { k: k.min(positions.len() - 1), neighbors, weights })
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Which points may contribute to the neighbor loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    /// Points whose displacement exceeds the threshold.
    Threshold(f64),
    /// Every point (gate removed).
    AlwaysOpen,
}

impl Gate {
    fn is_open(&self, displacement: f64) -> bool {
        match *self {
            Gate::Threshold(tau) => displacement > tau,
            Gate::AlwaysOpen => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborLoss {
    pub value: f64,
    /// Fraction of edges with both endpoints gated open.
    pub active_gate_fraction: f64,
    /// Gradient w.r.t. `u_curr`, when requested.
    pub grad: Option<Vec<[f64; 3]>>,
}

fn group_offsets(graph: &NeighborGraph, u: &[[f64; 3]]) -> Vec<[f64; 3]> {
    graph
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut c = [0.0; 3];
            for &j in n {
                for a in 0..3 {
                    c[a] += u[j as usize][a];
                }
            }
            let inv = 1.0 / n.len() as f64;
            std::array::from_fn(|a| u[i][a] - c[a] * inv)
        })
        .collect()
}

pub fn neighbor_loss(graph: &NeighborGraph, u_prev: &[[f64; 3]], u_curr: &[[f64; 3]], gate: Gate) -> Result<NeighborLoss> {
    neighbor_loss_impl(graph, u_prev, u_curr, gate, false)
}

pub fn neighbor_loss_grad(graph: &NeighborGraph, u_prev: &[[f64; 3]], u_curr: &[[f64; 3]], gate: Gate) -> Result<NeighborLoss> {
    neighbor_loss_impl(graph, u_prev, u_curr, gate, true)
}

fn neighbor_loss_impl(
    graph: &NeighborGraph,
    u_prev: &[[f64; 3]],
    u_curr: &[[f64; 3]],
    gate: Gate,
    want_grad: bool,
) -> Result<NeighborLoss> {
    let n = graph.len();
    if u_prev.len() != n || u_curr.len() != n {
        return Err(invalid(format!(
            "neighbor graph has {n} points, got {} previous and {} current positions",
            u_prev.len(),
            u_curr.len()
        )));
    }
    let open: Vec<bool> = u_prev.iter().zip(u_curr).map(|(a, b)| gate.is_open(dist(*a, *b))).collect();
    let l_prev = group_offsets(graph, u_prev);
    let l_curr = group_offsets(graph, u_curr);
    let mut value = 0.0;
    let mut active = 0usize;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; n]);
    for (i, nbrs) in graph.neighbors.iter().enumerate() {
        if !open[i] {
            continue;
        }
        let mut c = 0.0;
        for &j in nbrs {
            if open[j as usize] {
                c += dist(u_prev[i], u_prev[j as usize]);
                active += 1;
            }
        }
        if c == 0.0 {
            continue;
        }
        let e: [f64; 3] = std::array::from_fn(|a| l_curr[i][a] - l_prev[i][a]);
        value += c * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]);
        if let Some(g) = grad.as_mut() {
            let inv = 1.0 / nbrs.len() as f64;
            for a in 0..3 {
                g[i][a] += 2.0 * c * e[a];
            }
            for &j in nbrs {
                for a in 0..3 {
                    g[j as usize][a] -= 2.0 * c * e[a] * inv;
                }
            }
        }
    }
    let edges = graph.num_edges();
    Ok(NeighborLoss {
        value,
        active_gate_fraction: if edges == 0 { 0.0 } else { active as f64 / edges as f64 },
        grad,
    })
}

/// Per-term values of one fine-stage objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub neighbor: f64,
    pub tv: f64,
    pub active_gate_fraction: f64,
}

/// Neighbor-term inputs: the graph and the two frames it compares.
pub struct NeighborInputs<'a> {
    pub graph: &'a NeighborGraph,
    pub u_prev: &'a [[f64; 3]],
    pub u_curr: &'a [[f64; 3]],
    pub gate: Gate,
}

/// Gradients produced by [`fine_loss_grad`].
pub struct FineLossGrads {
    /// One image gradient per render.
    pub images: Vec<Image>,
    /// Gradient w.r.t. `u_curr`, already scaled by the neighbor weight.
    pub u_curr: Option<Vec<[f64; 3]>>,
}

/// `λ1·L1 + λ2·D-SSIM + λ3·neighbor + λ4·TV`. Image terms are averaged over
/// the render/ground-truth pairs; the neighbor term is skipped when absent.
pub fn fine_loss(
    renders: &[Image],
    gts: &[Image],
    grid: &FeatureGrid,
    neighbor: Option<&NeighborInputs>,
    weights: &LossWeights,
) -> Result<LossComponents> {
    fine_loss_impl(renders, gts, Some(grid), neighbor, weights, None)
}

/// [`fine_loss`] plus gradients; the TV gradient is added into `d_grid`.
pub fn fine_loss_grad(
    renders: &[Image],
    gts: &[Image],
    grid: &FeatureGrid,
    neighbor: Option<&NeighborInputs>,
    weights: &LossWeights,
    d_grid: &mut [f64],
) -> Result<(LossComponents, FineLossGrads)> {
    let mut grads = FineLossGrads { images: Vec::new(), u_curr: None };
    let c = fine_loss_impl(renders, gts, Some(grid), neighbor, weights, Some((&mut grads, d_grid)))?;
    Ok((c, grads))
}

/// [`fine_loss_grad`] without the grid term, for callers that apply the
/// regularizer once per batch; `tv` is reported as 0.
pub(crate) fn sample_loss_grad(
    renders: &[Image],
    gts: &[Image],
    neighbor: Option<&NeighborInputs>,
    weights: &LossWeights,
) -> Result<(LossComponents, FineLossGrads)> {
    let mut grads = FineLossGrads { images: Vec::new(), u_curr: None };
    let c = fine_loss_impl(renders, gts, None, neighbor, weights, Some((&mut grads, &mut [])))?;
    Ok((c, grads))
}

fn fine_loss_impl(
    renders: &[Image],
    gts: &[Image],
    grid: Option<&FeatureGrid>,
    neighbor: Option<&NeighborInputs>,
    weights: &LossWeights,
    mut grads: Option<(&mut FineLossGrads, &mut [f64])>,
) -> Result<LossComponents> {
    weights.validate()?;
    if renders.len() != gts.len() || renders.is_empty() {
        return Err(invalid(format!("{} renders for {} ground-truth images", renders.len(), gts.len())));
    }
    let inv = 1.0 / renders.len() as f64;
    let mut c = LossComponents::default();
    for (r, g) in renders.iter().zip(gts) {
        let l1 = l1_loss(r, g)?;
        c.l1 += inv * l1;
        if let Some((gr, _)) = grads.as_mut() {
            let mut img = l1_grad(r, g)?;
            for v in img.data.iter_mut() {
                *v *= weights.l1 * inv;
            }
            if weights.dssim != 0.0 {
                let (d, dg) = dssim_loss_grad(r, g)?;
                c.dssim += inv * d;
                for (v, dv) in img.data.iter_mut().zip(&dg.data) {
                    *v += weights.dssim * inv * dv;
                }
            } else {
                c.dssim += inv * dssim_loss(r, g)?;
            }
            gr.images.push(img);
        } else {
            c.dssim += inv * dssim_loss(r, g)?;
        }
    }
    c.tv = match (grid, grads.as_mut()) {
        (None, _) => 0.0,
        (Some(grid), Some((_, d_grid))) => tv_loss_grad_accumulate(grid, weights.tv, d_grid),
        (Some(grid), None) => tv_loss(grid),
    };
    if let Some(nb) = neighbor {
        let want = grads.is_some() && weights.neighbor != 0.0;
        let r = neighbor_loss_impl(nb.graph, nb.u_prev, nb.u_curr, nb.gate, want)?;
        c.neighbor = r.value;
        c.active_gate_fraction = r.active_gate_fraction;
        if let (Some((gr, _)), Some(mut g)) = (grads.as_mut(), r.grad) {
            for v in g.iter_mut() {
                for a in v.iter_mut() {
                    *a *= weights.neighbor;
                }
            }
            gr.u_curr = Some(g);
        }
    }
    c.total = weights.l1 * c.l1 + weights.dssim * c.dssim + weights.neighbor * c.neighbor + weights.tv * c.tv;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let a = Image::filled(4, 3, [0.2, 0.4, 0.6]);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = Image::filled(4, 3, [0.7, 0.9, 1.1]);
        assert!((l1_loss(&b, &a).unwrap() - 0.5).abs() < 1e-15);
        assert!(l1_loss(&a, &Image::zeros(3, 4)).is_err());
    }

    #[test]
    fn tv_examples() {
        let g = FeatureGrid::from_data([2, 1, 1], 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(tv_loss(&g), 1.0);
        let g = FeatureGrid::from_data([2, 2, 2], 2, vec![0.3; 16]).unwrap();
        assert_eq!(tv_loss(&g), 0.0);
        assert_eq!(tv_loss(&FeatureGrid::zeros([1, 1, 1], 3).unwrap()), 0.0);
    }

    #[test]
    fn small_graphs() {
        let g = build_neighbor_graph(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], 20).unwrap();
        assert_eq!(g.neighbors, vec![vec![1, 2], vec![0, 2], vec![1, 0]]);
        let square = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let g = build_neighbor_graph(&square, 1).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![1], vec![0]]);
        assert!(build_neighbor_graph(&[[0.0; 3]], 3).is_err());
    }

    #[test]
    fn neighbor_loss_gates_and_translation() {
        let pts: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, (i * i) as f64 * 0.1, 0.0]).collect();
        let g = build_neighbor_graph(&pts, 3).unwrap();
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 5.0, p[1], p[2] - 2.0]).collect();
        assert!(neighbor_loss(&g, &pts, &moved, Gate::Threshold(0.1)).unwrap().value < 1e-20);
        let mut small = pts.clone();
        small[2][0] += 0.05;
        let r = neighbor_loss(&g, &pts, &small, Gate::Threshold(0.1)).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.active_gate_fraction, 0.0);
        assert!(neighbor_loss(&g, &pts, &small, Gate::AlwaysOpen).unwrap().value > 0.0);
        assert!(neighbor_loss(&g, &pts[..5], &small, Gate::AlwaysOpen).is_err());
    }

    #[test]
    fn fine_loss_with_zero_weights_is_zero() {
        let a = Image::filled(12, 12, [0.1; 3]);
        let b = Image::filled(12, 12, [0.9; 3]);
        let grid = FeatureGrid::from_data([2, 1, 1], 1, vec![0.0, 1.0]).unwrap();
        let zero = LossWeights { l1: 0.0, dssim: 0.0, neighbor: 0.0, tv: 0.0 };
        assert_eq!(fine_loss(&[a.clone()], &[b.clone()], &grid, None, &zero).unwrap().total, 0.0);
        let only_l1 = LossWeights { l1: 1.0, ..zero };
        assert_eq!(fine_loss(&[a.clone()], &[a], &grid, None, &only_l1).unwrap().total, 0.0);
        assert!(LossWeights { l1: -1.0, ..zero }.validate().is_err());
    }
}
