mod common;

use common::*;
use gs4d_core::buffer::Image;
use gs4d_core::gaussians::{Gaussian, GaussianCloud};
use gs4d_core::numerics::logit;
use gs4d_core::rasterizer::{render, render_backward, RenderOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..4 {
        let s = fd_summary(seed, 32, 32, 1e-3);
        assert!(s.reordered * 20 < s.probes, "seed {seed}: {s:?}");
        assert!(s.within_1e2 >= 0.95 && s.max_rel < 5e-2, "seed {seed}: {s:?}");
    }
}

#[test]
fn small_steps_agree_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 12);
    let cam = front_camera(24);
    let d_image = Image::from_data(24, 24, (0..24 * 24 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    for p in rasterizer_fd(&cloud, &cam, &d_image, 1e-6).iter().filter(|p| !p.order_changed) {
        assert!((p.analytic - p.numeric).abs() < 1e-5 * (1.0 + p.analytic.abs()), "{p:?}");
    }
}

#[test]
fn single_splat_color_gradient_is_alpha_times_transmittance() {
    let cam = front_camera(20);
    let mut cloud = GaussianCloud::new();
    cloud.push(Gaussian {
        position: [0.05, -0.02, 0.0],
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: [-2.0, -2.2, -2.1],
        opacity_logit: logit(0.7),
        color: [0.3, 0.6, 0.9],
    });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d_image = Image::from_data(20, 20, (0..20 * 20 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let target = render(&cloud, &cam, &RenderOptions::default()).unwrap();
    let grads = render_backward(&cloud, &cam, &target, &d_image).unwrap();
    // One splat over background 0: alpha·T = alpha at every pixel.
    for ch in 0..3 {
        let expected: f64 = (0..400).map(|p| target.alpha[p] * d_image.data[p * 3 + ch]).sum();
        assert!((grads.colors[0][ch] - expected).abs() < 1e-12, "{} vs {expected}", grads.colors[0][ch]);
    }
}

#[test]
fn two_overlapping_splats_match_direct_compositing() {
    let cam = front_camera(16);
    let mut cloud = GaussianCloud::new();
    let mk = |x: f64, z: f64, o: f64, c: [f64; 3]| Gaussian {
        position: [x, 0.0, z],
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: [-1.8; 3],
        opacity_logit: logit(o),
        color: c,
    };
    cloud.push(mk(0.05, -0.2, 0.6, [1.0, 0.0, 0.0]));
    cloud.push(mk(-0.05, 0.2, 0.5, [0.0, 0.0, 1.0]));
    let img = render(&cloud, &cam, &RenderOptions::default()).unwrap().color;
    // The second Gaussian is nearer the camera at z = 2.5.
    let a = direct_alpha(&cloud.get(1), &cam, 8.0, 8.0);
    let b = direct_alpha(&cloud.get(0), &cam, 8.0, 8.0);
    let expected = [b * (1.0 - a), 0.0, a];
    let got = img.pixel(8, 8);
    for ch in 0..3 {
        assert!((got[ch] - expected[ch]).abs() < 1e-6, "{got:?} vs {expected:?}");
    }
}

/// α of one Gaussian at a pixel, from the projection formulas written out.
fn direct_alpha(g: &Gaussian, cam: &gs4d_core::camera::CameraView, px: f64, py: f64) -> f64 {
    use gs4d_core::numerics::{quat_to_rotation, Quat, Vec3};
    let r = quat_to_rotation(Quat::from_array(g.rotation)).unwrap();
    let s = nalgebra::Matrix3::from_diagonal(&Vec3::new(g.log_scale[0].exp(), g.log_scale[1].exp(), g.log_scale[2].exp()));
    let cov = r * s * s * r.transpose();
    let p = cam.world_to_camera(&Vec3::from(g.position));
    let w = cam.rotation();
    let j = nalgebra::Matrix2x3::new(cam.fx() / p.z, 0.0, -cam.fx() * p.x / (p.z * p.z), 0.0, cam.fy() / p.z, -cam.fy() * p.y / (p.z * p.z));
    let cov2 = j * w * cov * w.transpose() * j.transpose() + nalgebra::Matrix2::identity() * gs4d_core::gaussians::LOW_PASS_FLOOR;
    let mean = [cam.fx() * p.x / p.z + cam.cx(), cam.fy() * p.y / p.z + cam.cy()];
    let d = nalgebra::Vector2::new(px - mean[0], py - mean[1]);
    let power = -0.5 * (d.transpose() * cov2.try_inverse().unwrap() * d)[0];
    let floor = (-12.0f64).exp();
    gs4d_core::numerics::sigmoid(g.opacity_logit) * (power.exp() - floor) / (1.0 - floor)
}
