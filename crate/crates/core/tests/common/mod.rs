#![allow(dead_code)]

use posekit::geometry::{
    project, random_rotation_with, so3_exp, CameraIntrinsics, Point2, Point3, RigidTransform, Vec3,
};
use posekit::keypoints::{generate_virtual_keypoints_with, KeypointDistribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct Scene {
    pub k: CameraIntrinsics,
    pub virtual_kps: Vec<Point3>,
    /// Camera-1-from-virtual placement of the keypoints.
    pub c1_t_p: RigidTransform,
    pub c1_t_c2: RigidTransform,
    pub kps1: Vec<Point2>,
    pub kps2: Vec<Point2>,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    let n = Normal::new(0.0, 1.0).unwrap();
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)).normalize()
}

/// Unit vector at least 60° away from the optical axis, so the two
/// cameras keep parallax on every keypoint.
pub fn lateral_unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = unit_vector(rng);
        if v.z.abs() <= 0.5 {
            return v;
        }
    }
}

/// Two cameras looking at a unit-scale keypoint cloud 4–8 units away.
pub fn scene(n: usize, dist: KeypointDistribution, seed: u64) -> Scene {
    let mut rng = rng(seed);
    let k = CameraIntrinsics::new(600.0, 610.0, 320.0, 240.0).unwrap();
    let virtual_kps = generate_virtual_keypoints_with(n, dist, &mut rng).unwrap();
    let c1_t_p = RigidTransform::new(
        random_rotation_with(&mut rng),
        Vec3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(4.0..8.0),
        ),
    );
    let angle = rng.random_range(0.05..0.4);
    let c1_t_c2 = RigidTransform::new(
        so3_exp(&(unit_vector(&mut rng) * angle)),
        lateral_unit_vector(&mut rng) * rng.random_range(0.5..1.5),
    );
    let c2_t_p = c1_t_c2.inverse() * c1_t_p;
    let kps1 = virtual_kps
        .iter()
        .map(|x| project(&k, &c1_t_p, x).unwrap())
        .collect();
    let kps2 = virtual_kps
        .iter()
        .map(|x| project(&k, &c2_t_p, x).unwrap())
        .collect();
    Scene {
        k,
        virtual_kps,
        c1_t_p,
        c1_t_c2,
        kps1,
        kps2,
    }
}

pub fn perturb(kps: &[Point2], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Point2> {
    let n = Normal::new(0.0, sigma).unwrap();
    kps.iter()
        .map(|p| Point2::new(p.x + n.sample(rng), p.y + n.sample(rng)))
        .collect()
}
