//! Tiled software rasterizer for projected Gaussians and its analytic backward pass.
//!
//! Per pixel, Gaussians are composited front to back in ascending camera
//! depth (ties broken by index):
//!
//! ```text
//! α_k = opacity_k · g_k,   g_k = (exp(p_k) − exp(c)) / (1 − exp(c)),   p_k = -½ dᵀ Σ₂⁻¹ d
//! C   = Σ_k c_k α_k T_k + T_end · background,   T_k = Π_{j<k} (1 - α_j)
//! ```
//!
//! A Gaussian is skipped at a pixel when its exponent `p_k` is below the
//! cutoff `c =` [`EXPONENT_CUTOFF`]. The falloff `g_k` is the Gaussian shifted
//! to reach 0 exactly at the cutoff, so α has no jump there and equals the
//! opacity at the mean. Compositing stops once transmittance falls below
//! [`TRANSMITTANCE_CUTOFF`]. Tiling only decides which Gaussians a pixel
//! visits; every Gaussian left out of a tile has an exponent below the cutoff
//! on all of that tile's pixels, so tiled and untiled renders are identical.
//!
//! Work is split per tile. Gradients are accumulated in per-tile buffers and
//! merged in tile order, so results do not depend on the number of threads.

use rayon::prelude::*;

use crate::buffer::Image;
use crate::camera::CameraView;
use crate::error::{invalid, shape, Result};
use crate::gaussians::{conic, conic_backward, project, project_backward, GaussianCloud, ProjectionCache};
use crate::numerics::{Mat2, Vec2};

pub const TILE_SIZE: usize = 16;
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
pub const EXPONENT_CUTOFF: f64 = -12.0;

/// Gradient buffer laid out like the cloud it belongs to.
pub type RenderGradients = GaussianCloud;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// `false` visits every Gaussian at every pixel (reference path).
    pub tiled: bool,
}

impl RenderOptions {
    pub fn with_background(background: [f64; 3]) -> Self {
        RenderOptions { background, tiled: true }
    }
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { background: [0.0; 3], tiled: true }
    }
}

#[derive(Clone, Debug)]
struct Splat {
    mean: [f64; 2],
    conic: [f64; 3],
    cov: Mat2,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

#[derive(Clone, Copy, Debug)]
struct TileLayout {
    width: usize,
    height: usize,
    tile_w: usize,
    tile_h: usize,
    tiles_x: usize,
    tiles_y: usize,
}

impl TileLayout {
    fn new(width: usize, height: usize, tiled: bool) -> Self {
        let (tile_w, tile_h) = if tiled { (TILE_SIZE, TILE_SIZE) } else { (width.max(1), height.max(1)) };
        TileLayout { width, height, tile_w, tile_h, tiles_x: width.div_ceil(tile_w), tiles_y: height.div_ceil(tile_h) }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` of a tile.
    fn bounds(&self, tile: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * self.tile_w;
        let y0 = ty * self.tile_h;
        (x0, (x0 + self.tile_w).min(self.width), y0, (y0 + self.tile_h).min(self.height))
    }
}

/// Output of [`render`]: color and alpha buffers plus the per-tile,
/// depth-sorted contributor lists the backward pass replays.
#[derive(Clone, Debug)]
pub struct RenderTarget {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub color: Image,
    pub alpha: Vec<f64>,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    layout: TileLayout,
    bins: Vec<Vec<u32>>,
    /// Per pixel, how many entries of its tile's list were visited.
    visited: Vec<u32>,
    num_gaussians: usize,
}

impl RenderTarget {
    /// Depth-sorted Gaussian indices binned into the tile containing pixel `(x, y)`.
    pub fn tile_contributors(&self, x: usize, y: usize) -> &[u32] {
        let tile = (y / self.layout.tile_h) * self.layout.tiles_x + x / self.layout.tile_w;
        &self.bins[tile]
    }

    /// The depth-sorted Gaussians actually visited at pixel `(x, y)`.
    pub fn pixel_contributors(&self, x: usize, y: usize) -> &[u32] {
        let n = self.visited[y * self.width + x] as usize;
        &self.tile_contributors(x, y)[..n]
    }
}

fn project_all(cloud: &GaussianCloud, camera: &CameraView) -> Result<Vec<Option<(Splat, ProjectionCache)>>> {
    (0..cloud.len())
        .map(|i| {
            Ok(project(&cloud.get(i), camera)?.map(|(p, cache)| {
                (
                    Splat {
                        mean: [p.mean2d.x, p.mean2d.y],
                        conic: conic(&p.cov2d),
                        cov: p.cov2d,
                        opacity: p.opacity,
                        color: p.color,
                        depth: p.depth,
                    },
                    cache,
                )
            }))
        })
        .collect()
}

fn depth_order(splats: &[Option<(Splat, ProjectionCache)>]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).filter(|&i| splats[i as usize].is_some()).collect();
    let depth = |i: u32| splats[i as usize].as_ref().map(|s| s.0.depth).unwrap();
    order.sort_by(|&a, &b| depth(a).total_cmp(&depth(b)).then(a.cmp(&b)));
    order
}

fn bin(layout: &TileLayout, splats: &[Option<(Splat, ProjectionCache)>], order: &[u32], tiled: bool) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); layout.count()];
    if !tiled {
        if let Some(b) = bins.first_mut() {
            b.extend_from_slice(order);
        }
        return bins;
    }
    let (w, h) = (layout.width as f64, layout.height as f64);
    for &i in order {
        let s = &splats[i as usize].as_ref().unwrap().0;
        // Ellipse dᵀΣ⁻¹d = -2·cutoff has half-extent sqrt(-2·cutoff·Σ_aa) per axis;
        // one pixel of slack absorbs rounding in the exponent.
        let rx = (-2.0 * EXPONENT_CUTOFF * s.cov[(0, 0)]).sqrt() + 1.0;
        let ry = (-2.0 * EXPONENT_CUTOFF * s.cov[(1, 1)]).sqrt() + 1.0;
        let (x_lo, x_hi) = (s.mean[0] - rx, s.mean[0] + rx);
        let (y_lo, y_hi) = (s.mean[1] - ry, s.mean[1] + ry);
        if x_hi < 0.0 || y_hi < 0.0 || x_lo > w - 1.0 || y_lo > h - 1.0 {
            continue;
        }
        let tx0 = (x_lo.max(0.0) as usize) / layout.tile_w;
        let tx1 = ((x_hi.min(w - 1.0)) as usize) / layout.tile_w;
        let ty0 = (y_lo.max(0.0) as usize) / layout.tile_h;
        let ty1 = ((y_hi.min(h - 1.0)) as usize) / layout.tile_h;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * layout.tiles_x + tx].push(i);
            }
        }
    }
    bins
}

/// `exp(EXPONENT_CUTOFF)` and `1 / (1 − exp(EXPONENT_CUTOFF))`.
#[inline]
fn falloff_shift() -> (f64, f64) {
    let floor = EXPONENT_CUTOFF.exp();
    (floor, 1.0 / (1.0 - floor))
}

/// Walks the depth-sorted list at one pixel, calling `visit` for every
/// contribution with `(gaussian, alpha, gaussian_falloff, transmittance_before, dx, dy)`.
/// Returns the final transmittance and the number of list entries visited.
#[inline]
fn walk_pixel(
    px: f64,
    py: f64,
    ids: &[u32],
    splats: &[Option<(Splat, ProjectionCache)>],
    mut visit: impl FnMut(u32, f64, f64, f64, f64, f64),
) -> (f64, u32) {
    let (floor, span) = falloff_shift();
    let mut t = 1.0;
    let mut visited = 0u32;
    for (k, &id) in ids.iter().enumerate() {
        let s = &splats[id as usize].as_ref().unwrap().0;
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
        if power < EXPONENT_CUTOFF {
            continue;
        }
        let falloff = (power.exp() - floor) * span;
        let alpha = s.opacity * falloff;
        visit(id, alpha, falloff, t, dx, dy);
        t *= 1.0 - alpha;
        visited = k as u32 + 1;
        if t < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    (t, visited)
}

struct TileForward {
    color: Vec<[f64; 3]>,
    transmittance: Vec<f64>,
    visited: Vec<u32>,
}

/// Renders `cloud` as seen from `camera`.
pub fn render(cloud: &GaussianCloud, camera: &CameraView, options: &RenderOptions) -> Result<RenderTarget> {
    cloud.validate()?;
    if !options.background.iter().all(|v| v.is_finite()) {
        return Err(invalid("background must be finite"));
    }
    let (width, height) = (camera.width, camera.height);
    let splats = project_all(cloud, camera)?;
    let order = depth_order(&splats);
    let layout = TileLayout::new(width, height, options.tiled);
    let bins = bin(&layout, &splats, &order, options.tiled);

    let tiles: Vec<TileForward> = (0..layout.count())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = layout.bounds(tile);
            let ids = &bins[tile];
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileForward { color: Vec::with_capacity(n), transmittance: Vec::with_capacity(n), visited: Vec::with_capacity(n) };
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut c = [0.0; 3];
                    let (t, visited) = walk_pixel(x as f64, y as f64, ids, &splats, |id, alpha, _, t, _, _| {
                        let col = &splats[id as usize].as_ref().unwrap().0.color;
                        for ch in 0..3 {
                            c[ch] += col[ch] * alpha * t;
                        }
                    });
                    out.color.push(c);
                    out.transmittance.push(t);
                    out.visited.push(visited);
                }
            }
            out
        })
        .collect();

    let mut color = Image::zeros(width, height);
    let mut transmittance = vec![1.0; width * height];
    let mut visited = vec![0u32; width * height];
    for (tile, out) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = layout.bounds(tile);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let t = out.transmittance[k];
                let c = out.color[k];
                let bg = options.background;
                color.set_pixel(x, y, [c[0] + t * bg[0], c[1] + t * bg[1], c[2] + t * bg[2]]);
                transmittance[y * width + x] = t;
                visited[y * width + x] = out.visited[k];
                k += 1;
            }
        }
    }
    let alpha = transmittance.iter().map(|t| 1.0 - t).collect();
    Ok(RenderTarget {
        width,
        height,
        background: options.background,
        color,
        alpha,
        transmittance,
        layout,
        bins,
        visited,
        num_gaussians: cloud.len(),
    })
}

/// Screen-space gradients for one Gaussian.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution {
    id: u32,
    alpha: f64,
    falloff: f64,
    t: f64,
    dx: f64,
    dy: f64,
}

/// Gradient of `Σ_pixels d_image ⊙ image` w.r.t. every cloud parameter.
pub fn render_backward(
    cloud: &GaussianCloud,
    camera: &CameraView,
    target: &RenderTarget,
    d_image: &Image,
) -> Result<RenderGradients> {
    if d_image.width != target.width || d_image.height != target.height || d_image.data.len() != target.width * target.height * 3 {
        return Err(invalid(format!(
            "upstream image is {}x{}, render target is {}x{}",
            d_image.width, d_image.height, target.width, target.height
        )));
    }
    if cloud.len() != target.num_gaussians || camera.width != target.width || camera.height != target.height {
        return Err(shape("render target was produced from different inputs"));
    }
    cloud.validate()?;
    let splats = project_all(cloud, camera)?;
    let layout = target.layout;
    let bg = target.background;
    let (floor, span) = falloff_shift();

    let tile_grads: Vec<Vec<SplatGrad>> = (0..layout.count())
        .into_par_iter()
        .map(|tile| {
            let ids = &target.bins[tile];
            let mut local = vec![SplatGrad::default(); ids.len()];
            if ids.is_empty() {
                return local;
            }
            // Bin position of each Gaussian id in this tile.
            let pos_of = |id: u32| ids.iter().position(|&j| j == id).unwrap();
            let mut slot = std::collections::HashMap::with_capacity(ids.len());
            let (x0, x1, y0, y1) = layout.bounds(tile);
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * target.width + x;
                    let d_c = [d_image.data[pix * 3], d_image.data[pix * 3 + 1], d_image.data[pix * 3 + 2]];
                    if d_c == [0.0; 3] {
                        continue;
                    }
                    let n = target.visited[pix] as usize;
                    contribs.clear();
                    walk_pixel(x as f64, y as f64, &ids[..n], &splats, |id, alpha, falloff, t, dx, dy| {
                        contribs.push(Contribution { id, alpha, falloff, t, dx, dy });
                    });
                    let mut behind = bg;
                    for c in contribs.iter().rev() {
                        let s = &splats[c.id as usize].as_ref().unwrap().0;
                        let k = *slot.entry(c.id).or_insert_with(|| pos_of(c.id));
                        let g = &mut local[k];
                        let w = c.alpha * c.t;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            g.color[ch] += d_c[ch] * w;
                            d_alpha += d_c[ch] * (s.color[ch] - behind[ch]);
                            behind[ch] = s.color[ch] * c.alpha + (1.0 - c.alpha) * behind[ch];
                        }
                        d_alpha *= c.t;
                        g.opacity += d_alpha * c.falloff;
                        // dg/dp = exp(p) / (1 − exp(c)) = g + exp(c) / (1 − exp(c))
                        let d_power = d_alpha * s.opacity * (c.falloff + floor * span);
                        let [a, b, cc] = s.conic;
                        g.mean[0] += d_power * (a * c.dx + b * c.dy);
                        g.mean[1] += d_power * (b * c.dx + cc * c.dy);
                        g.conic[0] += d_power * (-0.5 * c.dx * c.dx);
                        g.conic[1] += d_power * (-c.dx * c.dy);
                        g.conic[2] += d_power * (-0.5 * c.dy * c.dy);
                    }
                }
            }
            local
        })
        .collect();

    let mut per_gaussian = vec![SplatGrad::default(); cloud.len()];
    for (tile, local) in tile_grads.iter().enumerate() {
        for (g, &id) in local.iter().zip(&target.bins[tile]) {
            per_gaussian[id as usize].add(g);
        }
    }

    let mut grads = cloud.zeros_like();
    for (i, sg) in per_gaussian.iter().enumerate() {
        let Some((s, cache)) = &splats[i] else { continue };
        let o = s.opacity;
        grads.colors[i] = sg.color;
        grads.opacity_logits[i] = sg.opacity * o * (1.0 - o);
        let d_cov = conic_backward(&s.cov, sg.conic);
        let pg = project_backward(&cloud.get(i), camera, cache, Vec2::new(sg.mean[0], sg.mean[1]), &d_cov)?;
        grads.positions[i] = pg.d_position;
        grads.rotations[i] = pg.d_rotation;
        grads.log_scales[i] = pg.d_log_scale;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Gaussian;
    use crate::numerics::{logit, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(size: usize) -> CameraView {
        let k = CameraView::intrinsics_from_fov(40.0, size, size).unwrap();
        CameraView::look_at(Vec3::new(0.0, 0.0, 2.5), Vec3::zeros(), Vec3::y(), k, size, size).unwrap()
    }

    pub(crate) fn random_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
        let mut c = GaussianCloud::new();
        for _ in 0..n {
            c.push(Gaussian {
                position: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                rotation: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5],
                log_scale: [rng.gen_range(-3.5..-2.0), rng.gen_range(-3.5..-2.0), rng.gen_range(-3.5..-2.0)],
                opacity_logit: rng.gen_range(-1.0..2.0),
                color: [rng.gen(), rng.gen(), rng.gen()],
            });
        }
        c
    }

    #[test]
    fn empty_cloud_renders_background() {
        let bg = [0.2, 0.4, 0.6];
        let t = render(&GaussianCloud::new(), &camera(20), &RenderOptions::with_background(bg)).unwrap();
        assert_eq!(t.color, Image::filled(20, 20, bg));
        assert!(t.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn centered_gaussian_pixel_equals_opacity() {
        let mut cloud = GaussianCloud::new();
        cloud.push(Gaussian {
            position: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [(0.05f64).ln(); 3],
            opacity_logit: logit(0.9),
            color: [1.0; 3],
        });
        let cam = camera(32);
        let t = render(&cloud, &cam, &RenderOptions::default()).unwrap();
        let p = t.color.pixel(16, 16);
        for v in p {
            assert!((v - 0.9).abs() < 1e-6);
        }
        assert!((t.alpha[16 * 32 + 16] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_parameter_is_reported_by_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = random_cloud(&mut rng, 4);
        cloud.log_scales[2][1] = f64::NAN;
        let err = render(&cloud, &camera(16), &RenderOptions::default()).unwrap_err();
        assert!(err.to_string().contains("gaussian 2"), "{err}");
    }

    #[test]
    fn tiled_and_naive_renders_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for size in [17, 40] {
            let cloud = random_cloud(&mut rng, 60);
            let cam = camera(size);
            let bg = [0.1, 0.2, 0.3];
            let tiled = render(&cloud, &cam, &RenderOptions { background: bg, tiled: true }).unwrap();
            let naive = render(&cloud, &cam, &RenderOptions { background: bg, tiled: false }).unwrap();
            assert_eq!(tiled.color.data, naive.color.data);
            assert_eq!(tiled.alpha, naive.alpha);
        }
    }

    #[test]
    fn alpha_is_a_probability_and_color_blends_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 40);
        let cam = camera(24);
        let black = render(&cloud, &cam, &RenderOptions::with_background([0.0; 3])).unwrap();
        let white = render(&cloud, &cam, &RenderOptions::with_background([1.0; 3])).unwrap();
        for p in 0..24 * 24 {
            let a = black.alpha[p];
            assert!((0.0..=1.0).contains(&a));
            for ch in 0..3 {
                let diff = white.color.data[p * 3 + ch] - black.color.data[p * 3 + ch];
                assert!((diff - (1.0 - a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn storage_order_does_not_change_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 30);
        let mut perm: Vec<usize> = (0..30).collect();
        for i in (1..30).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = GaussianCloud::new();
        for &i in &perm {
            shuffled.push(cloud.get(i));
        }
        let cam = camera(24);
        let a = render(&cloud, &cam, &RenderOptions::default()).unwrap();
        let b = render(&shuffled, &cam, &RenderOptions::default()).unwrap();
        assert_eq!(a.color.data, b.color.data);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 10);
        let cam = camera(16);
        let t = render(&cloud, &cam, &RenderOptions::default()).unwrap();
        let g = render_backward(&cloud, &cam, &t, &Image::zeros(16, 16)).unwrap();
        assert_eq!(g, cloud.zeros_like());
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cloud = random_cloud(&mut rng, 3);
        let cam = camera(16);
        let t = render(&cloud, &cam, &RenderOptions::default()).unwrap();
        assert!(render_backward(&cloud, &cam, &t, &Image::zeros(15, 16)).is_err());
    }

    #[test]
    fn culled_gaussians_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cloud = random_cloud(&mut rng, 5);
        cloud.positions[3] = [0.0, 0.0, 3.0]; // behind the camera at z = 2.5
        let cam = camera(16);
        let t = render(&cloud, &cam, &RenderOptions::default()).unwrap();
        let up = Image::filled(16, 16, [1.0, -0.5, 0.25]);
        let g = render_backward(&cloud, &cam, &t, &up).unwrap();
        assert_eq!(g.positions[3], [0.0; 3]);
        assert_eq!(g.rotations[3], [0.0; 4]);
        assert_eq!(g.log_scales[3], [0.0; 3]);
        assert_eq!(g.opacity_logits[3], 0.0);
        assert_eq!(g.colors[3], [0.0; 3]);
    }

    #[test]
    fn gaussians_behind_saturated_pixels_get_no_gradient() {
        // An opaque, wide front sheet saturates transmittance everywhere it covers.
        let mut cloud = GaussianCloud::new();
        for _ in 0..6 {
            cloud.push(Gaussian {
                position: [0.0, 0.0, 0.5],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [0.5, 0.5, -3.0],
                opacity_logit: 12.0,
                color: [1.0, 0.0, 0.0],
            });
        }
        cloud.push(Gaussian {
            position: [0.0, 0.0, -0.5],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [-3.0; 3],
            opacity_logit: 2.0,
            color: [0.0, 1.0, 0.0],
        });
        let cam = camera(16);
        let t = render(&cloud, &cam, &RenderOptions::default()).unwrap();
        let g = render_backward(&cloud, &cam, &t, &Image::filled(16, 16, [1.0; 3])).unwrap();
        assert_eq!(g.colors[6], [0.0; 3]);
        assert_eq!(g.positions[6], [0.0; 3]);
    }
}
