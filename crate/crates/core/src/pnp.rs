//! Perspective-n-point: linear DLT initialization, Gauss-Newton refinement
//! of the reprojection error, and a seeded random-restart path for four or
//! five points or planar configurations.
//!
//! All returned transforms map object-frame points into the camera frame.

use nalgebra::{DMatrix, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    random_rotation_with, so3_exp, CameraIntrinsics, Mat3, Point2, Point3, RigidTransform,
    Rotation, Vec3, DEPTH_EPS,
};
use crate::keypoints::{KeypointSet2D, KeypointSet3D};

pub const MIN_CORRESPONDENCES: usize = 4;
pub const MIN_DLT_POINTS: usize = 6;
pub const MAX_REFINE_ITERS: usize = 50;
pub const STEP_TOL: f64 = 1e-12;
pub const RESTARTS: usize = 32;
pub const RESTART_DEPTH_RANGE: (f64, f64) = (0.5, 20.0);

/// Relative singular value below which the centered 3D points are treated
/// as planar.
const PLANARITY_TOL: f64 = 1e-6;
const MAX_HALVINGS: usize = 10;

type Vec6 = SVector<f64, 6>;
type Mat6 = SMatrix<f64, 6, 6>;

/// Index-aligned 2D-3D pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    points3d: KeypointSet3D,
    points2d: KeypointSet2D,
}

impl Correspondences {
    pub fn new(points3d: KeypointSet3D, points2d: KeypointSet2D) -> Result<Self> {
        if points3d.len() != points2d.len() {
            return Err(Error::LengthMismatch(points3d.len(), points2d.len()));
        }
        if points3d.len() < MIN_CORRESPONDENCES {
            return Err(Error::TooFewPoints {
                needed: MIN_CORRESPONDENCES,
                got: points3d.len(),
            });
        }
        Ok(Correspondences { points3d, points2d })
    }

    pub fn len(&self) -> usize {
        self.points3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points3d.is_empty()
    }

    pub fn points3d(&self) -> &[Point3] {
        &self.points3d
    }

    pub fn points2d(&self) -> &[Point2] {
        &self.points2d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    /// Step norm fell below tolerance or no step could lower the cost.
    Converged,
    MaxIterations,
    /// A trial step put a point behind the camera; the pose is the best
    /// iterate seen before that.
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFit {
    pub pose: RigidTransform,
    /// Root-mean-square reprojection error in pixels.
    pub rmse: f64,
    pub iterations: usize,
    pub status: FitStatus,
}

/// Root-mean-square pixel distance between projections and detections.
pub fn reprojection_rmse(
    c: &Correspondences,
    k: &CameraIntrinsics,
    pose: &RigidTransform,
) -> Result<f64> {
    Ok((sum_sq_residuals(c, k, pose)? / c.len() as f64).sqrt())
}

fn sum_sq_residuals(
    c: &Correspondences,
    k: &CameraIntrinsics,
    pose: &RigidTransform,
) -> Result<f64> {
    let mut total = 0.0;
    for (x, obs) in c.points3d.iter().zip(&c.points2d) {
        let px = k.project_camera_point(&pose.apply(x))?;
        total += (px - obs).norm_squared();
    }
    Ok(total)
}

fn check_non_planar(points: &[Point3]) -> Result<()> {
    let n = points.len() as f64;
    let centroid = points.iter().map(|p| p.coords).sum::<Vec3>() / n;
    let centered = DMatrix::from_fn(points.len(), 3, |i, j| points[i][j] - centroid[j]);
    let s = centered.singular_values();
    let (max, min) = (s.max(), s.min());
    if !(max > 0.0) || min <= PLANARITY_TOL * max {
        return Err(Error::DegenerateConfiguration(
            "3D points are coplanar or collinear",
        ));
    }
    Ok(())
}

/// Linear pose estimate from at least six non-coplanar correspondences.
///
/// The 3D points are centered and scaled before building the `2n × 12`
/// system on normalized image coordinates; the left 3x3 block of the null
/// vector is projected onto SO(3).
pub fn pnp_dlt(c: &Correspondences, k: &CameraIntrinsics) -> Result<RigidTransform> {
    let n = c.len();
    if n < MIN_DLT_POINTS {
        return Err(Error::TooFewPoints {
            needed: MIN_DLT_POINTS,
            got: n,
        });
    }
    check_non_planar(&c.points3d)?;

    let centroid = c.points3d.iter().map(|p| p.coords).sum::<Vec3>() / n as f64;
    let scale = c
        .points3d
        .iter()
        .map(|p| (p.coords - centroid).norm())
        .sum::<f64>()
        / n as f64;
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, obs)) in c.points3d.iter().zip(&c.points2d).enumerate() {
        let xn = (x.coords - centroid) / scale;
        let h = [xn.x, xn.y, xn.z, 1.0];
        let ray = k.back_project(obs);
        for j in 0..4 {
            a[(2 * i, j)] = -h[j];
            a[(2 * i, 8 + j)] = ray.x * h[j];
            a[(2 * i + 1, 4 + j)] = -h[j];
            a[(2 * i + 1, 8 + j)] = ray.y * h[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty");
    let p = v_t.row(idx);
    let mut m = Mat3::from_fn(|r, col| p[4 * r + col]);
    let mut p4 = Vec3::new(p[3], p[7], p[11]);
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let svd_m = m.svd(true, true);
    let lambda = svd_m.singular_values.sum() / 3.0;
    if !(lambda > 0.0) {
        return Err(Error::DegenerateConfiguration(
            "DLT solution has a singular rotation block",
        ));
    }
    let rotation = Rotation::nearest(&m);
    let t_normalized = p4 / lambda;
    let translation = t_normalized * scale - rotation.rotate(&centroid);
    Ok(RigidTransform::new(rotation, translation))
}

/// Gauss-Newton on the summed squared reprojection error with a left
/// axis-angle increment on the rotation and an additive translation step.
/// Steps that do not lower the cost, or that put a point behind the camera,
/// are halved; if no halving yields a point set in front of the camera the
/// fit stops as [`FitStatus::NotConverged`]. The returned pose never has a
/// larger RMSE than `init`.
pub fn pnp_refine(
    c: &Correspondences,
    k: &CameraIntrinsics,
    init: &RigidTransform,
) -> Result<PoseFit> {
    let mut pose = *init;
    let mut cost = sum_sq_residuals(c, k, &pose)?;
    let n = c.len() as f64;
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;

    'outer: while iterations < MAX_REFINE_ITERS {
        iterations += 1;
        let mut h = Mat6::zeros();
        let mut g = Vec6::zeros();
        for (x, obs) in c.points3d.iter().zip(&c.points2d) {
            let rx = pose.rotation.rotate(&x.coords);
            let pc = rx + pose.translation;
            let iz = 1.0 / pc.z;
            let r = [
                k.fx * pc.x * iz + k.cx - obs.x,
                k.fy * pc.y * iz + k.cy - obs.y,
            ];
            // d(pixel)/d(camera point)
            let du = Vec3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz * iz);
            let dv = Vec3::new(0.0, k.fy * iz, -k.fy * pc.y * iz * iz);
            for (row, d) in [du, dv].iter().enumerate() {
                // d(camera point)/dω = -[Rx]ₓ, so d/dω = (Rx × d)ᵀ
                let jw = rx.cross(d);
                let j = Vec6::new(jw.x, jw.y, jw.z, d.x, d.y, d.z);
                h += j * j.transpose();
                g += j * r[row];
            }
        }
        let step = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => match h.svd(true, true).solve(&g, 1e-15) {
                Ok(s) => -s,
                Err(_) => {
                    status = FitStatus::Converged;
                    break;
                }
            },
        };
        if !step.iter().all(|v| v.is_finite()) {
            status = FitStatus::Converged;
            break;
        }
        if step.norm() < STEP_TOL {
            status = FitStatus::Converged;
            break;
        }

        let mut scale = 1.0;
        let mut feasible = false;
        for _ in 0..=MAX_HALVINGS {
            let dw = Vec3::new(step[0], step[1], step[2]) * scale;
            let dt = Vec3::new(step[3], step[4], step[5]) * scale;
            let candidate =
                RigidTransform::new(so3_exp(&dw) * pose.rotation, pose.translation + dt);
            match sum_sq_residuals(c, k, &candidate) {
                Ok(new_cost) if new_cost < cost => {
                    pose = candidate;
                    cost = new_cost;
                    continue 'outer;
                }
                Ok(_) => feasible = true,
                Err(Error::BehindCamera { .. }) => {}
                Err(e) => return Err(e),
            }
            scale *= 0.5;
        }
        status = if feasible {
            FitStatus::Converged
        } else {
            FitStatus::NotConverged
        };
        break;
    }

    Ok(PoseFit {
        pose,
        rmse: (cost / n).sqrt(),
        iterations,
        status,
    })
}

/// DLT plus refinement for six or more non-planar points; otherwise the
/// best of [`RESTARTS`] seeded random initializations, each refined.
pub fn solve_pnp(c: &Correspondences, k: &CameraIntrinsics, seed: u64) -> Result<RigidTransform> {
    solve_pnp_fit(c, k, seed).map(|f| f.pose)
}

pub fn solve_pnp_fit(c: &Correspondences, k: &CameraIntrinsics, seed: u64) -> Result<PoseFit> {
    if c.len() < MIN_CORRESPONDENCES {
        return Err(Error::TooFewPoints {
            needed: MIN_CORRESPONDENCES,
            got: c.len(),
        });
    }
    if c.len() >= MIN_DLT_POINTS {
        match pnp_dlt(c, k) {
            Ok(init) => match pnp_refine(c, k, &init) {
                Ok(fit) => return Ok(fit),
                Err(Error::BehindCamera { .. }) => {}
                Err(e) => return Err(e),
            },
            Err(Error::DegenerateConfiguration(_)) => {}
            Err(e) => return Err(e),
        }
    }
    solve_with_restarts(c, k, seed)
}

fn solve_with_restarts(c: &Correspondences, k: &CameraIntrinsics, seed: u64) -> Result<PoseFit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.len() as f64;
    let centroid3 = c.points3d.iter().map(|p| p.coords).sum::<Vec3>() / n;
    let centroid2 = Point2::from(
        c.points2d
            .iter()
            .map(|p| p.coords)
            .sum::<nalgebra::Vector2<f64>>()
            / n,
    );
    let ray = k.back_project(&centroid2);
    let (lo, hi) = (RESTART_DEPTH_RANGE.0.ln(), RESTART_DEPTH_RANGE.1.ln());

    let mut best: Option<PoseFit> = None;
    for _ in 0..RESTARTS {
        let rotation = random_rotation_with(&mut rng);
        let depth = rng.random_range(lo..hi).exp();
        let init = RigidTransform::new(rotation, ray * depth - rotation.rotate(&centroid3));
        if c.points3d.iter().any(|p| init.apply(p).z <= DEPTH_EPS) {
            continue;
        }
        let Ok(fit) = pnp_refine(c, k, &init) else {
            continue;
        };
        if !fit.rmse.is_finite() {
            continue;
        }
        // Strict comparison keeps the earliest restart on ties.
        if best.is_none_or(|b| fit.rmse < b.rmse) {
            best = Some(fit);
        }
    }
    best.ok_or(Error::NoSolution)
}
