mod common;

use common::{perturb, rng, scene, unit_vector};
use posekit::alignment::kabsch;
use posekit::geometry::{random_rotation_with, Mat3, Point2, Point3, RigidTransform, Vec3};
use posekit::keypoints::KeypointDistribution;
use posekit::losses::*;
use posekit::twoview::{epipolar_residual, projection_pair, triangulate, FundamentalMatrix};
use posekit::Error;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const DISTRIBUTIONS: [KeypointDistribution; 3] = [
    KeypointDistribution::Regular,
    KeypointDistribution::RSphere { radius: 1.0 },
    KeypointDistribution::RVolume { half_extent: 1.0 },
];

fn problem(s: &common::Scene) -> TwoViewProblem {
    TwoViewProblem::new(s.virtual_kps.clone(), &s.k, &s.k, &s.c1_t_c2).unwrap()
}

fn flatten(a: &[Point2], b: &[Point2]) -> Vec<f64> {
    a.iter().chain(b).flat_map(|p| [p.x, p.y]).collect()
}

fn unflatten(x: &[f64]) -> (Vec<Point2>, Vec<Point2>) {
    let pts: Vec<Point2> = x.chunks(2).map(|c| Point2::new(c[0], c[1])).collect();
    let n = pts.len() / 2;
    (pts[..n].to_vec(), pts[n..].to_vec())
}

#[test]
fn loss_vanishes_at_truth_for_every_layout() {
    let w = LossWeights::default();
    for dist in DISTRIBUTIONS {
        for n in [4, 6, 8, 12] {
            for seed in 0..10 {
                let s = scene(n, dist, seed);
                let p = problem(&s);
                let total = p.total(&s.kps1, &s.kps2, &w).unwrap();
                assert!(total <= 1e-7, "{dist:?} n={n} seed={seed}: {total}");
                let (reg, t_o) = p.registration(&s.kps1, &s.kps2).unwrap();
                assert!(reg <= 1e-9);
                let (dr, dt) = t_o.distance_to(&s.c1_t_p);
                assert!(dr <= 1e-8 && dt <= 1e-8, "{dr} {dt}");
                assert!(p.consistency(&s.kps1, &s.kps2, EpipolarPenalty::Absolute) <= 1e-10);
            }
        }
    }
}

#[test]
fn default_weights_are_one_hundred_each() {
    let w = LossWeights::default();
    assert_eq!((w.lambda1, w.lambda2), (100.0, 100.0));
    assert_eq!(w.epipolar, EpipolarPenalty::Absolute);
    assert!(LossWeights { lambda1: -1.0, ..w }.validate().is_err());
}

#[test]
fn registration_ignores_rigid_replacement_of_virtual_keypoints() {
    let mut r = rng(21);
    for seed in 0..50 {
        let s = scene(8, KeypointDistribution::RVolume { half_extent: 1.0 }, seed);
        let kps1 = perturb(&s.kps1, 2.0, &mut r);
        let kps2 = perturb(&s.kps2, 2.0, &mut r);
        let g = RigidTransform::new(random_rotation_with(&mut r), unit_vector(&mut r) * 3.0);
        let moved: Vec<Point3> = s.virtual_kps.iter().map(|x| g.apply(x)).collect();
        let (a, _) =
            registration_loss(&kps1, &kps2, &s.virtual_kps, &s.k, &s.k, &s.c1_t_c2).unwrap();
        let (b, _) = registration_loss(&kps1, &kps2, &moved, &s.k, &s.k, &s.c1_t_c2).unwrap();
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn registration_matches_standalone_pipeline_after_moving_one_keypoint() {
    for seed in 0..20 {
        let s = scene(8, KeypointDistribution::Regular, seed);
        let mut kps1 = s.kps1.clone();
        kps1[0].x += 10.0;
        let (p1, p2) = projection_pair(&s.k, &s.k, &s.c1_t_c2);
        let tri: Vec<Point3> = kps1
            .iter()
            .zip(&s.kps2)
            .map(|(a, b)| triangulate(a, b, &p1, &p2).unwrap())
            .collect();
        let t = kabsch(&s.virtual_kps, &tri).unwrap();
        let oracle = tri
            .iter()
            .zip(&s.virtual_kps)
            .map(|(y, x)| (y - t.apply(x)).norm())
            .sum::<f64>()
            / 8.0;
        assert!(oracle > 1e-6);
        let (loss, _) =
            registration_loss(&kps1, &s.kps2, &s.virtual_kps, &s.k, &s.k, &s.c1_t_c2).unwrap();
        assert!((loss - oracle).abs() <= 1e-12, "{loss} vs {oracle}");
        let (loss, _) = problem(&s).registration(&kps1, &s.kps2).unwrap();
        assert!((loss - oracle).abs() <= 1e-12);
    }
}

#[test]
fn registration_needs_three_keypoints() {
    let s = scene(4, KeypointDistribution::Regular, 3);
    let v = s.virtual_kps[..2].to_vec();
    let r = registration_loss(
        &s.kps1[..2].to_vec(),
        &s.kps2[..2].to_vec(),
        &v,
        &s.k,
        &s.k,
        &s.c1_t_c2,
    );
    assert!(r.is_err());
    assert!(matches!(
        registration_loss(
            &s.kps1,
            &s.kps2[..3].to_vec(),
            &s.virtual_kps,
            &s.k,
            &s.k,
            &s.c1_t_c2
        ),
        Err(Error::LengthMismatch(..))
    ));
}

#[test]
fn consistency_of_single_keypoint_by_hand() {
    // [t]x with t = (1, 2, 3), times an invertible matrix: rank two.
    let tx = Mat3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
    let m = Mat3::new(1.0, 0.5, 0.0, 0.0, 2.0, 0.25, 0.1, 0.0, 1.0);
    let f = tx * m;
    let fm = FundamentalMatrix::from_matrix(f).unwrap();
    let (u1, v1, u2, v2) = (0.3, -0.7, 1.1, 0.4);
    let x1 = [u1, v1, 1.0];
    let x2 = [u2, v2, 1.0];
    let mut by_hand = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            by_hand += x2[i] * f[(i, j)] * x1[j];
        }
    }
    let kps1 = vec![Point2::new(u1, v1)];
    let kps2 = vec![Point2::new(u2, v2)];
    assert!((epipolar_residual(&kps1[0], &kps2[0], &fm) - by_hand).abs() <= 1e-14);
    assert!((consistency_loss(&kps1, &kps2, &fm) - by_hand.abs()).abs() <= 1e-14);
    let sq = consistency_loss_with(&kps1, &kps2, &fm, EpipolarPenalty::Squared);
    assert!((sq - by_hand * by_hand).abs() <= 1e-14);
}

#[test]
fn consistency_is_never_negative() {
    let mut r = rng(5);
    for seed in 0..100 {
        let s = scene(6, KeypointDistribution::RSphere { radius: 1.0 }, seed);
        let kps1 = perturb(&s.kps1, 5.0, &mut r);
        let kps2 = perturb(&s.kps2, 5.0, &mut r);
        let p = problem(&s);
        assert!(consistency_loss(&kps1, &kps2, p.fundamental()) >= 0.0);
        assert!(p.consistency(&kps1, &kps2, EpipolarPenalty::Squared) >= 0.0);
    }
}

#[test]
fn total_is_linear_in_the_weights() {
    let mut r = rng(8);
    for seed in 0..20 {
        let s = scene(8, KeypointDistribution::Regular, seed);
        let kps1 = perturb(&s.kps1, 3.0, &mut r);
        let kps2 = perturb(&s.kps2, 3.0, &mut r);
        let w = LossWeights {
            lambda2: 0.0,
            ..LossWeights::default()
        };
        let total = total_loss(&kps1, &kps2, &s.virtual_kps, &s.k, &s.k, &s.c1_t_c2, &w).unwrap();
        let (reg, _) =
            registration_loss(&kps1, &kps2, &s.virtual_kps, &s.k, &s.k, &s.c1_t_c2).unwrap();
        assert!(
            (total - 100.0 * reg).abs() <= 1e-12,
            "{total} vs {}",
            100.0 * reg
        );

        let p = problem(&s);
        let full = p.total(&kps1, &kps2, &LossWeights::default()).unwrap();
        let con = consistency_loss(&kps1, &kps2, p.fundamental());
        assert!((full - 100.0 * reg - 100.0 * con).abs() <= 1e-12);
    }
}

#[test]
fn gradient_vanishes_at_truth() {
    for dist in DISTRIBUTIONS {
        for seed in 0..10 {
            let s = scene(8, dist, seed);
            let g = problem(&s)
                .gradient(&s.kps1, &s.kps2, &LossWeights::default(), 1e-4)
                .unwrap();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= 1e-4, "{norm}");
        }
    }
}

#[test]
fn gradient_orders_view_one_then_view_two() {
    let s = scene(6, KeypointDistribution::Regular, 2);
    let p = problem(&s);
    let w = LossWeights::default();
    let mut r = rng(2);
    let kps1 = perturb(&s.kps1, 3.0, &mut r);
    let kps2 = perturb(&s.kps2, 3.0, &mut r);
    let g = p.gradient(&kps1, &kps2, &w, 1e-4).unwrap();
    assert_eq!(g.len(), 24);
    let h = 1e-4;
    let mut plus = kps2.clone();
    let mut minus = kps2.clone();
    plus[1].y += h;
    minus[1].y -= h;
    let fd = (p.total(&kps1, &plus, &w).unwrap() - p.total(&kps1, &minus, &w).unwrap()) / (2.0 * h);
    assert!((g[12 + 3] - fd).abs() <= 1e-12 * fd.abs().max(1.0));
}

#[test]
fn gradient_agrees_with_directional_differences() {
    let mut r = rng(31);
    let w = LossWeights::default();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let s = scene(8, DISTRIBUTIONS[seed as usize % 3], seed);
        let p = problem(&s);
        let x = flatten(
            &perturb(&s.kps1, 3.0, &mut r),
            &perturb(&s.kps2, 3.0, &mut r),
        );
        let normal = Normal::new(0.0, 1.0).unwrap();
        let d: Vec<f64> = (0..x.len()).map(|_| normal.sample(&mut r)).collect();
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d: Vec<f64> = d.iter().map(|v| v / dn).collect();
        let (a, b) = unflatten(&x);
        let g = p.gradient(&a, &b, &w, h).unwrap();
        let along: f64 = g.iter().zip(&d).map(|(gi, di)| gi * di).sum();
        let eval = |sign: f64| {
            let y: Vec<f64> = x
                .iter()
                .zip(&d)
                .map(|(xi, di)| xi + sign * h * di)
                .collect();
            let (a, b) = unflatten(&y);
            p.total(&a, &b, &w).unwrap()
        };
        let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
        // `d` is a unit vector, so ‖g‖ bounds the size of either derivative.
        let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((along - fd).abs() / scale);
    }
    assert!(worst <= 1e-8, "worst relative mismatch {worst:e}");
}

#[test]
fn gradient_is_stable_when_the_step_doubles() {
    let mut r = rng(44);
    let w = LossWeights::default();
    for seed in 0..20 {
        let s = scene(8, KeypointDistribution::RVolume { half_extent: 1.0 }, seed);
        let p = problem(&s);
        let kps1 = perturb(&s.kps1, 3.0, &mut r);
        let kps2 = perturb(&s.kps2, 3.0, &mut r);
        let g1 = loss_gradient(
            &kps1,
            &kps2,
            &s.virtual_kps,
            &s.k,
            &s.k,
            &s.c1_t_c2,
            &w,
            1e-4,
        )
        .unwrap();
        let g2 = p.gradient(&kps1, &kps2, &w, 2e-4).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 0.01 * a.abs(), "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn refine_leaves_exact_keypoints_alone() {
    for seed in 0..10 {
        let s = scene(8, KeypointDistribution::Regular, seed);
        let (a, b, loss) = refine_keypoints(
            &s.kps1,
            &s.kps2,
            &s.virtual_kps,
            &s.k,
            &s.k,
            &s.c1_t_c2,
            &LossWeights::default(),
            &RefineConfig::default(),
        )
        .unwrap();
        assert!(loss <= 1e-7);
        for (x, y) in a.iter().chain(&b).zip(s.kps1.iter().chain(&s.kps2)) {
            assert!((x - y).norm() <= 1e-6);
        }
    }
}

#[test]
fn refine_with_zero_iterations_is_identity() {
    let s = scene(8, KeypointDistribution::Regular, 1);
    let mut r = rng(1);
    let kps1 = perturb(&s.kps1, 3.0, &mut r);
    let kps2 = perturb(&s.kps2, 3.0, &mut r);
    let cfg = RefineConfig {
        max_iters: 0,
        ..RefineConfig::default()
    };
    let out = problem(&s)
        .refine(&kps1, &kps2, &LossWeights::default(), &cfg)
        .unwrap();
    assert_eq!(out.kps1, kps1);
    assert_eq!(out.kps2, kps2);
    assert_eq!(out.final_loss, out.initial_loss);
    assert_eq!(out.iterations, 0);
}

#[test]
fn refine_history_never_increases() {
    let mut r = rng(77);
    for seed in 0..10 {
        let s = scene(8, KeypointDistribution::RSphere { radius: 1.0 }, seed);
        let kps1 = perturb(&s.kps1, 3.0, &mut r);
        let kps2 = perturb(&s.kps2, 3.0, &mut r);
        let cfg = RefineConfig {
            max_iters: 100,
            ..RefineConfig::default()
        };
        let out = problem(&s)
            .refine(&kps1, &kps2, &LossWeights::default(), &cfg)
            .unwrap();
        assert_eq!(out.history.len(), out.iterations + 1);
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.final_loss <= out.initial_loss);
        assert_eq!(*out.history.last().unwrap(), out.final_loss);
    }
}

#[test]
fn refine_rejects_bad_config() {
    let s = scene(8, KeypointDistribution::Regular, 1);
    let cfg = RefineConfig {
        step_size: 0.0,
        ..RefineConfig::default()
    };
    assert!(problem(&s)
        .refine(&s.kps1, &s.kps2, &LossWeights::default(), &cfg)
        .is_err());
}

#[test]
fn refine_converges_from_three_pixel_noise() {
    let mut converged = 0;
    let mut worst_final: f64 = 0.0;
    for seed in 0..100 {
        let s = scene(8, KeypointDistribution::Regular, 500 + seed);
        let mut r = rng(900 + seed);
        let kps1 = perturb(&s.kps1, 3.0, &mut r);
        let kps2 = perturb(&s.kps2, 3.0, &mut r);
        let out = problem(&s)
            .refine(
                &kps1,
                &kps2,
                &LossWeights::default(),
                &RefineConfig::default(),
            )
            .unwrap();
        if out.final_loss < 1e-4 && out.final_loss < out.initial_loss {
            converged += 1;
        }
        worst_final = worst_final.max(out.final_loss);
    }
    assert!(
        converged >= 95,
        "{converged}/100 reached loss < 1e-4 (worst final {worst_final:e})"
    );
}

#[test]
fn refine_lowers_loss_from_three_pixel_noise() {
    let mut lowered = 0;
    for seed in 0..100 {
        let s = scene(8, KeypointDistribution::Regular, 500 + seed);
        let mut r = rng(900 + seed);
        let kps1 = perturb(&s.kps1, 3.0, &mut r);
        let kps2 = perturb(&s.kps2, 3.0, &mut r);
        let cfg = RefineConfig {
            max_iters: 50,
            ..RefineConfig::default()
        };
        let out = problem(&s)
            .refine(&kps1, &kps2, &LossWeights::default(), &cfg)
            .unwrap();
        if out.final_loss < out.initial_loss {
            lowered += 1;
        }
    }
    assert!(lowered >= 95, "{lowered}/100");
}

#[test]
fn random_rigid_shift_of_both_views_is_not_free() {
    // Moving keypoints in one view only breaks both losses.
    let s = scene(8, KeypointDistribution::Regular, 9);
    let p = problem(&s);
    let mut r = rng(9);
    let shift = Vec3::new(r.random_range(2.0..4.0), r.random_range(2.0..4.0), 0.0);
    let kps1: Vec<Point2> = s
        .kps1
        .iter()
        .map(|q| Point2::new(q.x + shift.x, q.y + shift.y))
        .collect();
    assert!(p.registration(&kps1, &s.kps2).unwrap().0 > 1e-6);
    assert!(p.consistency(&kps1, &s.kps2, EpipolarPenalty::Absolute) > 1e-10);
}
