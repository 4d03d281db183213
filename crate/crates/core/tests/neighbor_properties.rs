use gs4d_core::losses::{build_neighbor_graph, neighbor_loss, neighbor_loss_grad, Gate};
use proptest::prelude::*;

fn cloud(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), n)
}

fn instance() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<[f64; 3]>, usize)> {
    (3usize..40).prop_flat_map(|n| (cloud(n), cloud(n), 1usize..21))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn zero_under_joint_translation((prev, _, k) in instance(), shift in prop::array::uniform3(-2.0f64..2.0)) {
        let graph = build_neighbor_graph(&prev, k).unwrap();
        let curr: Vec<[f64; 3]> = prev.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect();
        for gate in [Gate::AlwaysOpen, Gate::Threshold(0.0)] {
            let v = neighbor_loss(&graph, &prev, &curr, gate).unwrap().value;
            prop_assert!(v.abs() < 1e-20 + 1e-24 * v.abs().max(1.0), "{v}");
        }
    }

    #[test]
    fn zero_when_every_displacement_is_within_tau((prev, noise, k) in instance(), tau in 0.001f64..0.5) {
        let graph = build_neighbor_graph(&prev, k).unwrap();
        // Each step has length at most tau·√3·0.5 < tau.
        let curr: Vec<[f64; 3]> = prev.iter().zip(&noise).map(|(p, d)| std::array::from_fn(|a| p[a] + 0.5 * tau * d[a])).collect();
        let r = neighbor_loss(&graph, &prev, &curr, Gate::Threshold(tau)).unwrap();
        prop_assert_eq!(r.value, 0.0);
        prop_assert_eq!(r.active_gate_fraction, 0.0);
    }

    #[test]
    fn non_increasing_in_tau((prev, noise, k) in instance(), t1 in 0.0f64..0.6, t2 in 0.0f64..0.6) {
        let graph = build_neighbor_graph(&prev, k).unwrap();
        let curr: Vec<[f64; 3]> = prev.iter().zip(&noise).map(|(p, d)| std::array::from_fn(|a| p[a] + 0.3 * d[a])).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = neighbor_loss(&graph, &prev, &curr, Gate::Threshold(lo)).unwrap().value;
        let b = neighbor_loss(&graph, &prev, &curr, Gate::Threshold(hi)).unwrap().value;
        prop_assert!(b <= a, "tau {lo} -> {a}, tau {hi} -> {b}");
        let open = neighbor_loss(&graph, &prev, &curr, Gate::AlwaysOpen).unwrap().value;
        prop_assert!(a <= open);
    }

    #[test]
    fn gradient_matches_finite_differences((prev, noise, k) in instance(), tau in 0.0f64..0.2) {
        let graph = build_neighbor_graph(&prev, k).unwrap();
        let curr: Vec<[f64; 3]> = prev.iter().zip(&noise).map(|(p, d)| std::array::from_fn(|a| p[a] + 0.3 * d[a])).collect();
        let r = neighbor_loss_grad(&graph, &prev, &curr, Gate::Threshold(tau)).unwrap();
        let grad = r.grad.unwrap();
        // Gates are constants of the gradient; fix them by opening only the
        // points that are open at `curr`.
        let open: Vec<bool> = prev.iter().zip(&curr).map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt() > tau
        }).collect();
        let fixed = |u: &[[f64; 3]]| -> f64 {
            let mut total = 0.0;
            let center = |u: &[[f64; 3]], i: usize| -> [f64; 3] {
                let n = &graph.neighbors[i];
                std::array::from_fn(|a| u[i][a] - n.iter().map(|&j| u[j as usize][a]).sum::<f64>() / n.len() as f64)
            };
            for i in 0..u.len() {
                let (lc, lp) = (center(u, i), center(&prev, i));
                let e: f64 = (0..3).map(|a| (lc[a] - lp[a]).powi(2)).sum();
                for &j in &graph.neighbors[i] {
                    let j = j as usize;
                    if open[i] && open[j] {
                        let w: f64 = (0..3).map(|a| (prev[i][a] - prev[j][a]).powi(2)).sum::<f64>().sqrt();
                        total += e * w;
                    }
                }
            }
            total
        };
        let h = 1e-6;
        for i in 0..curr.len() {
            for a in 0..3 {
                let mut p = curr.clone();
                p[i][a] += h;
                let mut m = curr.clone();
                m[i][a] -= h;
                let fd = (fixed(&p) - fixed(&m)) / (2.0 * h);
                let err = (fd - grad[i][a]).abs() / fd.abs().max(grad[i][a].abs()).max(1e-6);
                prop_assert!(err < 1e-5, "point {} axis {}: {} vs {}", i, a, grad[i][a], fd);
            }
        }
    }
}
