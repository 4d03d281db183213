//! PSNR and SSIM, per image and aggregated over a view × frame grid.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), constants `C1 = 0.01²`,
//! `C2 = 0.03²`, zero padding at the borders, and averages the SSIM map
//! over pixels and channels. The same code produces the D-SSIM training
//! loss and its gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::buffer::Image;
use crate::error::{invalid, Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let x = i as f64 - r;
        (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian filter of a `h × w` plane with zero padding.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; w * h];
    for (src, dst) in plane.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        // Tap k reads src[x + k − r]; clip x so the read stays inside the row.
        for (k, &t) in taps.iter().enumerate() {
            let lo = r.saturating_sub(k);
            let hi = (w + r).saturating_sub(k).min(w);
            if lo >= hi {
                continue;
            }
            let shift = lo + k - r;
            for (d, v) in dst[lo..hi].iter_mut().zip(&src[shift..shift + hi - lo]) {
                *d += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &mut out[y * w..(y + 1) * w];
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            let t = taps[yy + r - y];
            for (o, v) in row.iter_mut().zip(&tmp[yy * w..(yy + 1) * w]) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean SSIM of `pred` against `gt`, plus its gradient w.r.t. `pred` when asked.
pub(crate) fn ssim_and_grad(pred: &Image, gt: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    pred.check_same_shape(gt).map_err(|e| invalid(e.to_string()))?;
    let (w, h) = (pred.width, pred.height);
    let n = w * h;
    if n == 0 {
        return Err(invalid("SSIM of an empty image"));
    }
    let taps = gaussian_taps();
    let scale = 1.0 / (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::zeros(w, h));
    for c in 0..3 {
        let x = pred.channel(c);
        let y = gt.channel(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mu_x = blur(&x, w, h, &taps);
        let mu_y = blur(&y, w, h, &taps);
        let m_xx = blur(&xx, w, h, &taps);
        let m_yy = blur(&yy, w, h, &taps);
        let m_xy = blur(&xy, w, h, &taps);
        let mut d_mu = vec![0.0; n];
        let mut d_xx = vec![0.0; n];
        let mut d_xy = vec![0.0; n];
        for p in 0..n {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * (m_xy[p] - mx * my) + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = (m_xx[p] - mx * mx) + (m_yy[p] - my * my) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_mu[p] = scale * (2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2));
                d_xx[p] = -scale * s / b2;
                d_xy[p] = scale * 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = blur(&d_mu, w, h, &taps);
            let g_xx = blur(&d_xx, w, h, &taps);
            let g_xy = blur(&d_xy, w, h, &taps);
            for p in 0..n {
                g.data[p * 3 + c] = g_mu[p] + 2.0 * x[p] * g_xx[p] + y[p] * g_xy[p];
            }
        }
    }
    Ok((total * scale, grad))
}

pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(ssim_and_grad(pred, gt, false)?.0)
}

/// PSNR in decibels, or `Identical` when the images match exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("identical"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Db(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Db(v) => Ok(Psnr::Db(v)),
            Raw::Tag(t) if t == "identical" => Ok(Psnr::Identical),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unexpected PSNR marker {t:?}"))),
        }
    }
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    pred.check_same_shape(gt).map_err(|e| invalid(e.to_string()))?;
    if pred.data.is_empty() {
        return Err(invalid("MSE of an empty image"));
    }
    Ok(pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64)
}

pub fn psnr(pred: &Image, gt: &Image, peak: f64) -> Result<Psnr> {
    let m = mse(pred, gt)?;
    Ok(if m == 0.0 { Psnr::Identical } else { Psnr::Db(10.0 * (peak * peak / m).log10()) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub view: usize,
    pub frame: usize,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Mean metrics over some subset of pairs. Identical pairs are excluded
/// from the PSNR mean and counted separately; PSNR is `Identical` when
/// every pair is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub psnr: Psnr,
    pub ssim: f64,
    pub identical: usize,
    pub count: usize,
}

impl MeanMetrics {
    fn of<'a>(pairs: impl Iterator<Item = &'a PairMetrics>) -> Self {
        let (mut psnr_sum, mut finite, mut identical, mut ssim_sum, mut count) = (0.0, 0usize, 0usize, 0.0, 0usize);
        for p in pairs {
            match p.psnr {
                Psnr::Db(v) => {
                    psnr_sum += v;
                    finite += 1;
                }
                Psnr::Identical => identical += 1,
            }
            ssim_sum += p.ssim;
            count += 1;
        }
        MeanMetrics {
            psnr: if finite == 0 { Psnr::Identical } else { Psnr::Db(psnr_sum / finite as f64) },
            ssim: if count == 0 { 0.0 } else { ssim_sum / count as f64 },
            identical,
            count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub per_view: BTreeMap<usize, MeanMetrics>,
    pub per_frame: BTreeMap<usize, MeanMetrics>,
    pub global: MeanMetrics,
}

impl MetricReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Self {
        let mut views: Vec<usize> = pairs.iter().map(|p| p.view).collect();
        views.sort_unstable();
        views.dedup();
        let mut frames: Vec<usize> = pairs.iter().map(|p| p.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        let per_view = views.iter().map(|&v| (v, MeanMetrics::of(pairs.iter().filter(|p| p.view == v)))).collect();
        let per_frame = frames.iter().map(|&f| (f, MeanMetrics::of(pairs.iter().filter(|p| p.frame == f)))).collect();
        let global = MeanMetrics::of(pairs.iter());
        MetricReport { pairs, per_view, per_frame, global }
    }

    /// Plain-text table: one row per pair, then per-view and global means.
    pub fn table(&self) -> String {
        let fmt = |p: Psnr| match p {
            Psnr::Db(v) => format!("{v:8.3}"),
            Psnr::Identical => format!("{:>8}", "ident"),
        };
        let mut s = format!("{:>4} {:>5} {:>8} {:>7}\n", "view", "frame", "psnr", "ssim");
        for p in &self.pairs {
            s += &format!("{:>4} {:>5} {} {:7.4}\n", p.view, p.frame, fmt(p.psnr), p.ssim);
        }
        for (v, m) in &self.per_view {
            s += &format!("{:>4} {:>5} {} {:7.4}\n", v, "mean", fmt(m.psnr), m.ssim);
        }
        s += &format!("{:>4} {:>5} {} {:7.4}\n", "all", "mean", fmt(self.global.psnr), self.global.ssim);
        s
    }
}

/// Temporal jitter of tracked points over `trajectory[frame][point]`: for
/// each tracked point, its largest frame-to-frame step minus its median
/// step; the maximum over points.
pub fn jitter(trajectory: &[Vec<[f64; 3]>], tracked: &[usize]) -> Result<f64> {
    if trajectory.len() < 2 {
        return Err(invalid("jitter needs at least two frames"));
    }
    let n = trajectory[0].len();
    if trajectory.iter().any(|f| f.len() != n) {
        return Err(Error::ShapeMismatch("trajectory frames hold different point counts".into()));
    }
    if let Some(&i) = tracked.iter().find(|&&i| i >= n) {
        return Err(invalid(format!("tracked point {i} out of range for {n} points")));
    }
    let mut worst = 0.0f64;
    for &i in tracked {
        let mut steps: Vec<f64> = trajectory
            .windows(2)
            .map(|w| (0..3).map(|a| (w[1][i][a] - w[0][i][a]).powi(2)).sum::<f64>().sqrt())
            .collect();
        steps.sort_by(f64::total_cmp);
        let excess = steps[steps.len() - 1] - steps[steps.len() / 2];
        worst = worst.max(excess);
    }
    Ok(worst)
}
