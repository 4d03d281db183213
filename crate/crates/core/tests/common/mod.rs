//! Brute-force reference implementations shared by the test suites. Each
//! one is written directly from the defining formula and shares no code
//! with the library.
#![allow(dead_code)]

use gs4d_core::buffer::Image;
use gs4d_core::camera::CameraView;
use gs4d_core::gaussians::{Gaussian, GaussianCloud};
use gs4d_core::numerics::{FeatureGrid, Vec3};
use rand::Rng;

pub fn l1(pred: &Image, gt: &Image) -> f64 {
    let mut sum = 0.0;
    for y in 0..pred.height {
        for x in 0..pred.width {
            let (p, g) = (pred.pixel(x, y), gt.pixel(x, y));
            for c in 0..3 {
                sum += (p[c] - g[c]).abs();
            }
        }
    }
    sum / (pred.width * pred.height * 3) as f64
}

/// Mean over every adjacent cell pair along every axis of the squared
/// feature difference.
pub fn tv(grid: &FeatureGrid) -> f64 {
    let [nx, ny, nz] = grid.dims;
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let here = grid.cell(i, j, k);
                let next = [(i + 1 < nx, (i + 1, j, k)), (j + 1 < ny, (i, j + 1, k)), (k + 1 < nz, (i, j, k + 1))];
                for (ok, (a, b, c)) in next {
                    if ok {
                        let there = grid.cell(a, b, c);
                        sum += here.iter().zip(there).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                        pairs += 1;
                    }
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// SSIM with an explicit 11×11 Gaussian window (σ = 1.5), zero padding,
/// averaged over pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    let r = 5i64;
    let mut w1 = [0.0; 11];
    for (i, w) in w1.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *w = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w1.iter().sum();
    w1.iter_mut().for_each(|w| *w /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h) = (a.width as i64, a.height as i64);
    let mut total = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || yy >= h || xx < 0 || xx >= w {
                            continue;
                        }
                        let k = w1[(dy + r) as usize] * w1[(dx + r) as usize];
                        let pa = a.pixel(xx as usize, yy as usize)[c];
                        let pb = b.pixel(xx as usize, yy as usize)[c];
                        ma += k * pa;
                        mb += k * pb;
                        aa += k * pa * pa;
                        bb += k * pb * pb;
                        ab += k * pa * pb;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    total / (w * h * 3) as f64
}

pub fn dssim(a: &Image, b: &Image) -> f64 {
    (1.0 - ssim(a, b)) / 2.0
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Neighbor loss summed edge by edge. `tau = None` removes the gate.
pub fn neighbor_loss(neighbors: &[Vec<u32>], prev: &[[f64; 3]], curr: &[[f64; 3]], tau: Option<f64>) -> f64 {
    let center = |u: &[[f64; 3]], i: usize| -> [f64; 3] {
        let n = &neighbors[i];
        let mut m = [0.0; 3];
        for &j in n {
            for a in 0..3 {
                m[a] += u[j as usize][a] / n.len() as f64;
            }
        }
        [u[i][0] - m[0], u[i][1] - m[1], u[i][2] - m[2]]
    };
    let gate = |i: usize| tau.map_or(1.0, |t| if dist(prev[i], curr[i]) > t { 1.0 } else { 0.0 });
    let mut total = 0.0;
    for i in 0..neighbors.len() {
        let (lc, lp) = (center(curr, i), center(prev, i));
        let e = (lc[0] - lp[0]).powi(2) + (lc[1] - lp[1]).powi(2) + (lc[2] - lp[2]).powi(2);
        for &j in &neighbors[i] {
            let j = j as usize;
            total += e * dist(prev[i], prev[j]) * gate(i) * gate(j);
        }
    }
    total
}

/// `k` nearest other points by full scan, ties to the lower index.
pub fn knn_scan(points: &[[f64; 3]], k: usize) -> Vec<Vec<u32>> {
    (0..points.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> =
                (0..points.len()).filter(|&j| j != i).map(|j| (dist(points[i], points[j]), j)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.iter().take(k).map(|&(_, j)| j as u32).collect()
        })
        .collect()
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::from_data(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

pub fn random_points(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
}

pub fn front_camera(size: usize) -> CameraView {
    let k = CameraView::intrinsics_from_fov(40.0, size, size).unwrap();
    CameraView::look_at(Vec3::new(0.0, 0.0, 2.5), Vec3::zeros(), Vec3::y(), k, size, size).unwrap()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
    let mut c = GaussianCloud::new();
    for _ in 0..n {
        c.push(Gaussian {
            position: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
            rotation: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5],
            log_scale: [rng.gen_range(-2.0..-1.2), rng.gen_range(-2.0..-1.2), rng.gen_range(-2.0..-1.2)],
            opacity_logit: rng.gen_range(-1.0..2.0),
            color: [rng.gen(), rng.gen(), rng.gen()],
        });
    }
    c
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// One gradient coordinate: analytic value against a central difference.
#[derive(Clone, Debug)]
pub struct GradProbe {
    pub group: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// The ±ε evaluations composite in different depth orders, so the
    /// objective has a jump inside the stencil.
    pub order_changed: bool,
}

fn depth_order(cloud: &GaussianCloud, camera: &CameraView) -> Vec<usize> {
    let z: Vec<f64> = (0..cloud.len()).map(|i| camera.world_to_camera(&cloud.position(i)).z).collect();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    order
}

/// Compares `render_backward` with central differences of
/// `Σ d_image ⊙ render(cloud)` for every parameter of `cloud`.
pub fn rasterizer_fd(cloud: &GaussianCloud, camera: &CameraView, d_image: &Image, eps: f64) -> Vec<GradProbe> {
    use gs4d_core::rasterizer::{render, render_backward, RenderOptions};
    let options = RenderOptions::default();
    let objective = |c: &GaussianCloud| -> f64 {
        let img = render(c, camera, &options).unwrap().color;
        img.data.iter().zip(&d_image.data).map(|(a, b)| a * b).sum()
    };
    let target = render(cloud, camera, &options).unwrap();
    let grads = render_backward(cloud, camera, &target, d_image).unwrap();
    let analytic: Vec<(&'static str, Vec<f64>)> = grads.groups().iter().map(|(n, g)| (*n, g.to_vec())).collect();
    let mut probes = Vec::new();
    for (g, (name, values)) in analytic.iter().enumerate() {
        for (index, &a) in values.iter().enumerate() {
            let mut plus = cloud.clone();
            plus.groups_mut()[g].1[index] += eps;
            let mut minus = cloud.clone();
            minus.groups_mut()[g].1[index] -= eps;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            let order_changed = depth_order(&plus, camera) != depth_order(&minus, camera);
            probes.push(GradProbe { group: name, index, analytic: a, numeric, order_changed });
        }
    }
    probes
}

/// Summary of a finite-difference sweep over one random scene.
#[derive(Clone, Debug)]
pub struct FdSummary {
    pub probes: usize,
    /// Probes left out because the stencil reorders the depth sort.
    pub reordered: usize,
    pub within_1e2: f64,
    pub max_rel: f64,
}

/// Random `n`-Gaussian scene at `size × size` under a random upstream image,
/// probed with central differences of step `eps`.
pub fn fd_summary(seed: u64, n: usize, size: usize, eps: f64) -> FdSummary {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(&mut rng, n);
    let cam = front_camera(size);
    let d_image = Image::from_data(size, size, (0..size * size * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let probes = rasterizer_fd(&cloud, &cam, &d_image, eps);
    let errs: Vec<f64> = probes.iter().filter(|p| !p.order_changed).map(|p| rel_err(p.analytic, p.numeric)).collect();
    FdSummary {
        probes: probes.len(),
        reordered: probes.len() - errs.len(),
        within_1e2: errs.iter().filter(|&&e| e < 1e-2).count() as f64 / errs.len() as f64,
        max_rel: errs.iter().copied().fold(0.0, f64::max),
    }
}
