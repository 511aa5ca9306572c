//! Rigid registration, the virtual-frame offset algebra, robust averaging
//! of offset transforms, and reference-pose labeling from two views.
//!
//! Frames: `c_T_p` is the PnP pose of the virtual-keypoint frame `p` in a
//! camera `c`, `c_T_o` the object pose, and the offset `T_a = o_T_p` maps
//! virtual-frame points into the object frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{so3_exp, CameraIntrinsics, Mat3, Point3, RigidTransform, Rotation, Vec3};
use crate::keypoints::KeypointSet2D;
use crate::pnp::{solve_pnp, Correspondences, MIN_CORRESPONDENCES};
use crate::twoview::{projection_pair, triangulate};

/// Relative singular-value floor below which the cross-covariance is
/// considered rank-deficient.
pub const KABSCH_DEGENERACY_TOL: f64 = 1e-12;

/// Least-squares rigid transform `T` minimizing `Σ‖dst_i − T(src_i)‖²`.
pub fn kabsch(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let cs = src.iter().map(|p| p.coords).sum::<Vec3>() / n;
    let cd = dst.iter().map(|p| p.coords).sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= KABSCH_DEGENERACY_TOL * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "point sets are collinear or coincident",
        ));
    }
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = Rotation::from_matrix_unchecked(r);
    Ok(RigidTransform::new(rotation, cd - rotation.rotate(&cs)))
}

/// `T_a = (c1_T_o)⁻¹ · (p_T_c1)⁻¹`.
pub fn offset_transform(c1_t_o: &RigidTransform, p_t_c1: &RigidTransform) -> RigidTransform {
    c1_t_o.inverse() * p_t_c1.inverse()
}

/// `c2_T_o = (p_T_c2)⁻¹ · T_a⁻¹`.
pub fn query_pose(p_t_c2: &RigidTransform, t_a: &RigidTransform) -> RigidTransform {
    p_t_c2.inverse() * t_a.inverse()
}

/// Thresholds and budgets for [`average_offset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragingParams {
    /// Rotation inlier threshold (radians).
    pub t_r: f64,
    /// Translation inlier threshold (scene units).
    pub t_t: f64,
    /// RANSAC confidence for early exit.
    pub eta: f64,
    pub max_iter: usize,
    /// Convergence tolerance on the mean tangent vector (radians).
    pub epsilon: f64,
    pub max_step: usize,
}

impl Default for AveragingParams {
    fn default() -> Self {
        AveragingParams {
            t_r: 0.1,
            t_t: 0.05,
            eta: 0.99,
            max_iter: 100,
            epsilon: 1e-9,
            max_step: 100,
        }
    }
}

impl AveragingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_r > 0.0) {
            return Err(invalid("t_r", "must be positive"));
        }
        if !(self.t_t > 0.0) {
            return Err(invalid("t_t", "must be positive"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(invalid("eta", "must lie in (0, 1)"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter", "must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon", "must be positive"));
        }
        if self.max_step == 0 {
            return Err(invalid("max_step", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetAverage {
    pub transform: RigidTransform,
    /// Indices of the inputs used for the mean, ascending.
    pub inliers: Vec<usize>,
    /// RANSAC hypotheses drawn.
    pub iterations: usize,
    /// Geodesic-mean update steps applied.
    pub steps: usize,
    /// Norm of the final mean tangent vector.
    pub residual: f64,
}

/// Robust average of offset transforms: single-sample RANSAC on rotation
/// and translation thresholds, then the geodesic L2 mean of inlier
/// rotations and the arithmetic mean of inlier translations.
pub fn average_offset(
    transforms: &[RigidTransform],
    params: &AveragingParams,
    seed: u64,
) -> Result<RigidTransform> {
    average_offset_detailed(transforms, params, seed).map(|a| a.transform)
}

pub fn average_offset_detailed(
    transforms: &[RigidTransform],
    params: &AveragingParams,
    seed: u64,
) -> Result<OffsetAverage> {
    if transforms.is_empty() {
        return Err(Error::EmptyInput);
    }
    params.validate()?;
    let n = transforms.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut inliers: Vec<usize> = Vec::new();
    let mut anchor = 0;
    let mut ratio = 0.0;
    let mut iterations = 0;
    for iter in 1..=params.max_iter {
        iterations = iter;
        let k = rng.random_range(0..n);
        let hyp = &transforms[k];
        let candidates: Vec<usize> = (0..n)
            .filter(|&i| {
                let dr = hyp.rotation.angle_to(&transforms[i].rotation);
                let dt = (hyp.translation - transforms[i].translation).norm();
                dr < params.t_r && dt < params.t_t
            })
            .collect();
        if inliers.len() < candidates.len() {
            inliers = candidates;
            anchor = k;
            ratio = inliers.len() as f64 / n as f64;
        }
        if 1.0 - (1.0 - ratio).powi(iter as i32) > params.eta {
            break;
        }
    }

    let mut mean = transforms[anchor].rotation;
    let mut steps = 0;
    let residual = loop {
        let r = inliers
            .iter()
            .map(|&j| (mean.transpose() * transforms[j].rotation).log())
            .sum::<Vec3>()
            / inliers.len() as f64;
        if r.norm() < params.epsilon || steps == params.max_step {
            break r.norm();
        }
        mean = mean * so3_exp(&r);
        steps += 1;
    };
    let translation = inliers
        .iter()
        .map(|&j| transforms[j].translation)
        .sum::<Vec3>()
        / inliers.len() as f64;

    Ok(OffsetAverage {
        transform: RigidTransform::new(mean, translation),
        inliers,
        iterations,
        steps,
        residual,
    })
}

/// Object pose in camera 1 from labeled two-view correspondences.
///
/// Each correspondence is triangulated in camera-1 coordinates, the points
/// are moved into the object frame with `frame` (camera 1 → object), and
/// PnP against the camera-1 detections yields `c1_T_o`.
pub fn reference_pose_from_correspondences(
    kps1: &KeypointSet2D,
    kps2: &KeypointSet2D,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    c1_t_c2: &RigidTransform,
    frame: &RigidTransform,
) -> Result<RigidTransform> {
    if kps1.len() != kps2.len() {
        return Err(Error::LengthMismatch(kps1.len(), kps2.len()));
    }
    if kps1.len() < MIN_CORRESPONDENCES {
        return Err(Error::TooFewCorrespondences {
            needed: MIN_CORRESPONDENCES,
            got: kps1.len(),
        });
    }
    let (p1, p2) = projection_pair(k1, k2, c1_t_c2);
    let points = kps1
        .iter()
        .zip(kps2)
        .map(|(a, b)| triangulate(a, b, &p1, &p2).map(|x| frame.apply(&x)))
        .collect::<Result<Vec<_>>>()?;
    let c = Correspondences::new(points, kps1.clone())?;
    solve_pnp(&c, k1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, random_rotation_with};
    use crate::keypoints::regular_polyhedron;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn random_transform<R: Rng>(rng: &mut R) -> RigidTransform {
        RigidTransform::new(
            random_rotation_with(rng),
            Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    fn cube() -> Vec<Point3> {
        let mut v = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-1.0, 1.0] {
                for z in [-1.0, 1.0] {
                    v.push(Point3::new(x, y, z));
                }
            }
        }
        v
    }

    fn residual(t: &RigidTransform, src: &[Point3], dst: &[Point3]) -> f64 {
        src.iter()
            .zip(dst)
            .map(|(s, d)| (t.apply(s) - d).norm_squared())
            .sum()
    }

    #[test]
    fn kabsch_identity() {
        let pts = cube();
        let t = kabsch(&pts, &pts).unwrap();
        let (dr, dt) = t.distance_to(&RigidTransform::identity());
        assert!(dr <= 1e-12 && dt <= 1e-12);
    }

    #[test]
    fn kabsch_recovers_planted_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let src = cube();
        for _ in 0..1000 {
            let gt = random_transform(&mut rng);
            let dst: Vec<_> = src.iter().map(|p| gt.apply(p)).collect();
            let (dr, dt) = kabsch(&src, &dst).unwrap().distance_to(&gt);
            assert!(dr <= 1e-9 && dt <= 1e-9);
        }
    }

    #[test]
    fn kabsch_never_returns_a_reflection() {
        let src = vec![
            Point3::new(0.3, 0.1, -0.2),
            Point3::new(-0.5, 0.7, 0.4),
            Point3::new(0.9, -0.4, 0.8),
            Point3::new(-0.1, -0.6, -0.9),
        ];
        let dst: Vec<_> = src.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let t = kabsch(&src, &dst).unwrap();
        assert!((t.rotation.matrix().determinant() - 1.0).abs() <= 1e-12);
        assert!(residual(&t, &src, &dst) > 0.0);
    }

    #[test]
    fn kabsch_input_errors() {
        let pts = cube();
        assert!(matches!(
            kabsch(&pts[..2], &pts[..2]),
            Err(Error::TooFewPoints { .. })
        ));
        let line: Vec<_> = (0..5)
            .map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.5))
            .collect();
        assert!(matches!(
            kabsch(&line, &line),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn kabsch_beats_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let src = cube();
        for _ in 0..100 {
            let gt = random_transform(&mut rng);
            let dst: Vec<_> = src
                .iter()
                .map(|p| gt.apply(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect();
            let best = residual(&kabsch(&src, &dst).unwrap(), &src, &dst);
            for _ in 0..50 {
                assert!(best <= residual(&random_transform(&mut rng), &src, &dst));
            }
        }
    }

    #[test]
    fn kabsch_centered_sets_have_zero_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let src = cube();
        for _ in 0..100 {
            let r = random_rotation_with(&mut rng);
            let dst: Vec<_> = src
                .iter()
                .map(|p| Point3::from(r.rotate(&p.coords)))
                .collect();
            assert!(kabsch(&src, &dst).unwrap().translation.norm() <= 1e-9);
        }
    }

    #[test]
    fn offset_of_identities_is_identity() {
        let id = RigidTransform::identity();
        assert_eq!(offset_transform(&id, &id), id);
        assert_eq!(query_pose(&id, &id), id);
    }

    #[test]
    fn query_pose_with_identity_offset_is_inverse() {
        let t = random_transform(&mut ChaCha8Rng::seed_from_u64(33));
        assert_eq!(
            query_pose(&t, &RigidTransform::identity()),
            t.inverse() * RigidTransform::identity()
        );
    }

    #[test]
    fn offset_chain_reproduces_query_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..200 {
            let o_t_p = random_transform(&mut rng);
            let c1_t_o = random_transform(&mut rng);
            let c2_t_o = random_transform(&mut rng);
            let p_t_c1 = (c1_t_o * o_t_p).inverse();
            let p_t_c2 = (c2_t_o * o_t_p).inverse();
            let t_a = offset_transform(&c1_t_o, &p_t_c1);
            let (dr, dt) = t_a.distance_to(&o_t_p);
            assert!(dr <= 1e-9 && dt <= 1e-9);
            let (dr, dt) = query_pose(&p_t_c2, &t_a).distance_to(&c2_t_o);
            assert!(dr <= 1e-9 && dt <= 1e-9);
        }
    }

    #[test]
    fn offset_is_the_same_from_any_reference_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let o_t_p = random_transform(&mut rng);
        let mut offsets = Vec::new();
        for _ in 0..5 {
            let c_t_o = random_transform(&mut rng);
            let p_t_c = (c_t_o * o_t_p).inverse();
            offsets.push(offset_transform(&c_t_o, &p_t_c));
        }
        for t in &offsets[1..] {
            let (dr, dt) = t.distance_to(&offsets[0]);
            assert!(dr <= 1e-9 && dt <= 1e-9);
        }
    }

    #[test]
    fn query_pose_is_invariant_to_virtual_frame_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..100 {
            let c1_t_o = random_transform(&mut rng);
            let p_t_c1 = random_transform(&mut rng);
            let p_t_c2 = random_transform(&mut rng);
            let g = random_transform(&mut rng);
            let a = query_pose(&p_t_c2, &offset_transform(&c1_t_o, &p_t_c1));
            let b = query_pose(&(g * p_t_c2), &offset_transform(&c1_t_o, &(g * p_t_c1)));
            let (dr, dt) = a.distance_to(&b);
            assert!(dr <= 1e-9 && dt <= 1e-9);
        }
    }

    #[test]
    fn average_of_single_transform_is_exact() {
        let t = random_transform(&mut ChaCha8Rng::seed_from_u64(37));
        assert_eq!(
            average_offset(&[t], &AveragingParams::default(), 1).unwrap(),
            t
        );
    }

    #[test]
    fn average_of_identical_inputs_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        for seed in 0..20 {
            let t = random_transform(&mut rng);
            let params = AveragingParams {
                t_r: rng.random_range(0.01..1.0),
                t_t: rng.random_range(0.01..1.0),
                eta: rng.random_range(0.5..0.999),
                max_iter: rng.random_range(1..50),
                epsilon: 1e-9,
                max_step: rng.random_range(1..50),
            };
            let avg = average_offset(&vec![t; 7], &params, seed).unwrap();
            let (dr, dt) = avg.distance_to(&t);
            assert!(dr <= 1e-12 && dt <= 1e-12);
        }
    }

    #[test]
    fn coaxial_rotations_average_to_mid_angle() {
        let ts: Vec<_> = [10.0f64, 20.0, 30.0]
            .iter()
            .map(|d| RigidTransform::from_rotation(so3_exp(&(Vec3::z() * d.to_radians()))))
            .collect();
        let params = AveragingParams {
            t_r: 1.0,
            ..AveragingParams::default()
        };
        let avg = average_offset_detailed(&ts, &params, 3).unwrap();
        assert_eq!(avg.inliers.len(), 3);
        let expected = so3_exp(&(Vec3::z() * 20f64.to_radians()));
        assert!(avg.transform.rotation.angle_to(&expected) <= 1e-8);
        assert!(avg.residual <= params.epsilon);
    }

    #[test]
    fn quarter_turn_outlier_is_excluded() {
        let mut ts = vec![RigidTransform::identity(); 9];
        ts.push(RigidTransform::from_rotation(so3_exp(
            &(Vec3::x() * PI / 2.0),
        )));
        for seed in 0..100 {
            let avg = average_offset_detailed(&ts, &AveragingParams::default(), seed).unwrap();
            assert_eq!(avg.inliers, (0..9).collect::<Vec<_>>());
            let (dr, dt) = avg.transform.distance_to(&RigidTransform::identity());
            assert!(dr <= 1e-12 && dt <= 1e-12);
        }
    }

    #[test]
    fn geodesic_mean_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let base = random_transform(&mut rng);
        let ts: Vec<_> = (0..8)
            .map(|_| {
                let w = Vec3::from_fn(|_, _| rng.random_range(-0.03..0.03));
                let t = Vec3::from_fn(|_, _| rng.random_range(-0.01..0.01));
                RigidTransform::new(base.rotation * so3_exp(&w), base.translation + t)
            })
            .collect();
        let params = AveragingParams::default();
        let avg = average_offset_detailed(&ts, &params, 5).unwrap();
        let r = avg
            .inliers
            .iter()
            .map(|&j| (avg.transform.rotation.transpose() * ts[j].rotation).log())
            .sum::<Vec3>()
            / avg.inliers.len() as f64;
        assert!(r.norm() <= params.epsilon);
    }

    #[test]
    fn ransac_exits_early_with_high_inlier_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let params = AveragingParams::default();
        let mut total = 0;
        for seed in 0..100 {
            let mut ts = vec![RigidTransform::identity(); 9];
            ts.push(random_transform(&mut rng));
            let avg = average_offset_detailed(&ts, &params, seed).unwrap();
            assert!(avg.iterations <= params.max_iter);
            total += avg.iterations;
        }
        assert!((total as f64 / 100.0) < 5.0);
    }

    #[test]
    fn averaging_rejects_bad_input() {
        assert_eq!(
            average_offset(&[], &AveragingParams::default(), 0),
            Err(Error::EmptyInput)
        );
        let bad = AveragingParams {
            eta: 1.0,
            ..AveragingParams::default()
        };
        assert!(average_offset(&[RigidTransform::identity()], &bad, 0).is_err());
    }

    fn labeled_pair() -> (
        KeypointSet2D,
        KeypointSet2D,
        CameraIntrinsics,
        RigidTransform,
        Vec<Point3>,
    ) {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let c1_t_c2 = RigidTransform::new(
            so3_exp(&Vec3::new(0.0, -0.15, 0.02)),
            Vec3::new(0.4, 0.05, 0.0),
        );
        let pts: Vec<_> = regular_polyhedron(8)
            .unwrap()
            .iter()
            .map(|p| Point3::from(p.coords * 0.3 + Vec3::new(0.1, -0.05, 3.0)))
            .collect();
        let kps1 = pts
            .iter()
            .map(|p| project(&k, &RigidTransform::identity(), p).unwrap())
            .collect();
        let kps2 = pts
            .iter()
            .map(|p| project(&k, &c1_t_c2.inverse(), p).unwrap())
            .collect();
        (kps1, kps2, k, c1_t_c2, pts)
    }

    #[test]
    fn reference_pose_with_identity_frame() {
        let (kps1, kps2, k, c1_t_c2, _) = labeled_pair();
        let pose = reference_pose_from_correspondences(
            &kps1,
            &kps2,
            &k,
            &k,
            &c1_t_c2,
            &RigidTransform::identity(),
        )
        .unwrap();
        let (dr, dt) = pose.distance_to(&RigidTransform::identity());
        assert!(dr <= 1e-6 && dt <= 1e-6);
    }

    #[test]
    fn reference_pose_with_planted_frame() {
        let (kps1, kps2, k, c1_t_c2, _) = labeled_pair();
        let g = RigidTransform::new(
            so3_exp(&Vec3::new(0.4, -0.7, 1.1)),
            Vec3::new(-0.2, 0.3, -2.5),
        );
        let pose = reference_pose_from_correspondences(&kps1, &kps2, &k, &k, &c1_t_c2, &g).unwrap();
        let (dr, dt) = pose.distance_to(&g.inverse());
        assert!(dr <= 1e-6 && dt <= 1e-6);
    }

    #[test]
    fn reference_pose_needs_four_correspondences() {
        let (kps1, kps2, k, c1_t_c2, _) = labeled_pair();
        assert_eq!(
            reference_pose_from_correspondences(
                &kps1[..3].to_vec(),
                &kps2[..3].to_vec(),
                &k,
                &k,
                &c1_t_c2,
                &RigidTransform::identity()
            ),
            Err(Error::TooFewCorrespondences { needed: 4, got: 3 })
        );
    }
}
