use air_core::analysis::spearman;
use air_core::eval::{clip_distance, frechet_distance, intra_lpips, kmedoids, kmedoids_traced, GaussianStats};
use air_core::losses::direction_loss;
use air_core::prompt::interpolate_label;
use proptest::prelude::*;

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, d)
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-6
}

fn points(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec_strategy(2), 2..=max)
}

fn euclid(a: &Vec<f64>, b: &Vec<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn matrix(pts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    pts.iter().map(|a| pts.iter().map(|b| euclid(a, b)).collect()).collect()
}

/// Covariance `A A^T` from a random square factor.
fn psd(d: usize, factor: &[f64]) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| factor[i * d + k] * factor[j * d + k]).sum())
                .collect()
        })
        .collect()
}

proptest! {
    #[test]
    fn direction_loss_is_bounded_and_scale_free(u in vec_strategy(6), t in vec_strategy(6), s in 0.1..20.0f64) {
        prop_assume!(nonzero(&u) && nonzero(&t));
        let l = direction_loss(std::slice::from_ref(&u), &t).unwrap().value;
        prop_assert!((0.0..=2.0).contains(&l));
        let scaled: Vec<f64> = u.iter().map(|x| x * s).collect();
        let l2 = direction_loss(&[scaled], &t).unwrap().value;
        prop_assert!((l - l2).abs() < 1e-12);
    }

    #[test]
    fn clip_distance_is_scale_invariant(
        gen in prop::collection::vec(vec_strategy(4), 1..6),
        reference in prop::collection::vec(vec_strategy(4), 1..6),
        a in 0.1..10.0f64,
        b in 0.1..10.0f64,
    ) {
        let Ok(base) = clip_distance(&gen, &reference) else { return Ok(()) };
        let sg: Vec<Vec<f64>> = gen.iter().map(|v| v.iter().map(|x| x * a).collect()).collect();
        let sr: Vec<Vec<f64>> = reference.iter().map(|v| v.iter().map(|x| x * b).collect()).collect();
        prop_assert!((clip_distance(&sg, &sr).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(
        ma in vec_strategy(3),
        mb in vec_strategy(3),
        fa in prop::collection::vec(-2.0..2.0f64, 9),
        fb in prop::collection::vec(-2.0..2.0f64, 9),
    ) {
        let a = GaussianStats::new(ma, psd(3, &fa)).unwrap();
        let b = GaussianStats::new(mb, psd(3, &fb)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * ab.max(1.0), "{ab} vs {ba}");
    }

    #[test]
    fn kmedoids_invariants(pts in points(10), k in 1usize..4, seed in any::<u64>()) {
        let d = matrix(&pts);
        let k = k.min(pts.len());
        let (c, trace) = kmedoids_traced(&d, k, seed).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0]), "cost went up: {trace:?}");
        prop_assert_eq!(c.medoids.len(), k);
        for &m in &c.medoids {
            prop_assert_eq!(c.assignment[m], m);
        }
        let total: f64 = c.assignment.iter().enumerate().map(|(i, &m)| d[i][m]).sum();
        prop_assert_eq!(total, c.cost);
        prop_assert_eq!(kmedoids(&d, k, seed).unwrap(), c);
    }

    #[test]
    fn intra_lpips_ignores_input_order(pts in points(8), k in 1usize..4, rot in 0usize..8) {
        let k = k.min(pts.len());
        let mut shuffled = pts.clone();
        shuffled.reverse();
        let r = rot % shuffled.len();
        shuffled.rotate_left(r);
        let a = intra_lpips(&pts, k, euclid, 0).unwrap();
        let b = intra_lpips(&shuffled, k, euclid, 0).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn spearman_is_rank_based(xs in prop::collection::vec(-100.0..100.0f64, 3..30)) {
        let ys: Vec<f64> = xs.iter().map(|x| x * x * x + 2.0 * x).collect();
        let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3)).collect();
        if let Ok(r) = spearman(&xs, &ys) {
            prop_assert!((r - 1.0).abs() < 1e-12);
            let neg: Vec<f64> = ys.iter().map(|y| -y).collect();
            prop_assert!((spearman(&cubed, &neg).unwrap() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn label_interpolation_endpoints(ys in vec_strategy(5), yt in vec_strategy(5), p in 0.0..=1.0f64) {
        prop_assert_eq!(interpolate_label(&ys, &yt, 0.0).unwrap(), ys.clone());
        prop_assert_eq!(interpolate_label(&ys, &yt, 1.0).unwrap(), yt.clone());
        let mid = interpolate_label(&ys, &yt, p).unwrap();
        for ((m, s), t) in mid.iter().zip(&ys).zip(&yt) {
            prop_assert!(*m >= s.min(*t) - 1e-12 && *m <= s.max(*t) + 1e-12);
        }
    }
}

#[test]
fn intra_lpips_degenerate_sets() {
    let same = vec![vec![1.0, 2.0]; 5];
    assert_eq!(intra_lpips(&same, 2, euclid, 0).unwrap(), 0.0);
    let two = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![9.0, 9.0], vec![9.0, 9.0]];
    assert_eq!(intra_lpips(&two, 2, euclid, 0).unwrap(), 0.0);
}
