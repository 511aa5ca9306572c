//! Two-view geometry: projection matrices, the per-keypoint DLT system,
//! SVD triangulation and the fundamental matrix.
//!
//! Triangulated points live in the frame of camera 1. Pixel coordinates are
//! `(u, v) = (column, row)`.

use nalgebra::{Matrix3x4, Matrix4, RowVector4, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{
    skew, CameraIntrinsics, Mat3, Point2, Point3, RigidTransform, Rotation, Vec3,
};

/// Minimum magnitude of the homogeneous fourth coordinate after triangulation.
pub const MIN_HOMOGENEOUS_W: f64 = 1e-12;
/// Baselines shorter than this make the fundamental matrix undefined.
pub const MIN_BASELINE: f64 = 1e-12;
/// Relative size of the second-smallest singular value of the DLT system
/// below which the solution is not unique (coincident camera centers).
pub const NULLITY_TOL: f64 = 1e-10;

/// `K·[R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn new(k: &CameraIntrinsics, rotation: &Rotation, translation: &Vec3) -> Self {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation.matrix());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        ProjectionMatrix(k.matrix() * rt)
    }

    /// `K·[R | t]` for the camera-from-world transform `cam_from_world`.
    pub fn from_pose(k: &CameraIntrinsics, cam_from_world: &RigidTransform) -> Self {
        Self::new(k, &cam_from_world.rotation, &cam_from_world.translation)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    /// Zero-based row `k` (row `k + 1` in the usual 1-based notation).
    pub fn row(&self, k: usize) -> RowVector4<f64> {
        self.0.row(k).into_owned()
    }

    /// Homogeneous image of a homogeneous point.
    pub fn apply(&self, x: &Vector4<f64>) -> Vec3 {
        self.0 * x
    }
}

/// Rank-2 matrix with `x₂ᵀ·F·x₁ = 0` for corresponding pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Mat3);

impl FundamentalMatrix {
    /// Validates rank 2: the smallest singular value must be at most
    /// `1e-9` times the largest.
    pub fn from_matrix(f: Mat3) -> Result<Self> {
        let s = f.singular_values();
        let (max, min) = (s.max(), s.min());
        if !(max > 0.0) || min > 1e-9 * max {
            return Err(Error::NotRankTwo(if max > 0.0 {
                min / max
            } else {
                f64::NAN
            }));
        }
        Ok(FundamentalMatrix(f))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

/// The `(R, t)` that maps camera-1 coordinates to camera-2 coordinates,
/// i.e. `R = c1_R_c2ᵀ`, `t = −c1_R_c2ᵀ·c1_t_c2`.
fn second_camera_extrinsics(c1_t_c2: &RigidTransform) -> (Rotation, Vec3) {
    let c2_t_c1 = c1_t_c2.inverse();
    (c2_t_c1.rotation, c2_t_c1.translation)
}

/// `P₁ = K₁[I | 0]`, `P₂ = K₂[R | t]`.
pub fn projection_pair(
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    c1_t_c2: &RigidTransform,
) -> (ProjectionMatrix, ProjectionMatrix) {
    let (r, t) = second_camera_extrinsics(c1_t_c2);
    (
        ProjectionMatrix::new(k1, &Rotation::identity(), &Vec3::zeros()),
        ProjectionMatrix::new(k2, &r, &t),
    )
}

/// Rows `u¹p₁³ − p₁¹`, `v¹p₁³ − p₁²`, `u²p₂³ − p₂¹`, `v²p₂³ − p₂²`.
pub fn build_dlt_matrix(
    kp1: &Point2,
    kp2: &Point2,
    p1: &ProjectionMatrix,
    p2: &ProjectionMatrix,
) -> Matrix4<f64> {
    Matrix4::from_rows(&[
        p1.row(2) * kp1.x - p1.row(0),
        p1.row(2) * kp1.y - p1.row(1),
        p2.row(2) * kp2.x - p2.row(0),
        p2.row(2) * kp2.y - p2.row(1),
    ])
}

/// Unit-norm right singular vector of the smallest singular value of `a`,
/// signed so that its fourth coordinate is non-negative.
pub fn dlt_null_vector(a: &Matrix4<f64>) -> Vector4<f64> {
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("four singular values");
    let mut x: Vector4<f64> = v_t.row(idx).transpose();
    if x.w < 0.0 {
        x = -x;
    }
    x
}

/// Linear triangulation: minimizes `‖A·x̃‖` over unit `x̃`, then divides by
/// the fourth coordinate. A two-dimensional null space (no parallax) is
/// reported as degenerate too.
pub fn triangulate(
    kp1: &Point2,
    kp2: &Point2,
    p1: &ProjectionMatrix,
    p2: &ProjectionMatrix,
) -> Result<Point3> {
    let a = build_dlt_matrix(kp1, kp2, p1, p2);
    let x = dlt_null_vector(&a);
    let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    if x.w.abs() < MIN_HOMOGENEOUS_W || sv[1] <= NULLITY_TOL * sv[3] {
        return Err(Error::DegenerateRays { w: x.w });
    }
    Ok(Point3::new(x.x / x.w, x.y / x.w, x.z / x.w))
}

/// `F = K₂⁻ᵀ·[t]ₓ·R·K₁⁻¹`.
pub fn fundamental_matrix(
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    c1_t_c2: &RigidTransform,
) -> Result<FundamentalMatrix> {
    let (r, t) = second_camera_extrinsics(c1_t_c2);
    if t.norm() < MIN_BASELINE {
        return Err(Error::ZeroBaseline);
    }
    let f = k2.inverse_matrix().transpose() * skew(&t) * r.matrix() * k1.inverse_matrix();
    Ok(FundamentalMatrix(f))
}

/// Signed bilinear form `[u², v², 1]·F·[u¹, v¹, 1]ᵀ`.
pub fn epipolar_residual(kp1: &Point2, kp2: &Point2, f: &FundamentalMatrix) -> f64 {
    let x1 = kp1.to_homogeneous();
    let x2 = kp2.to_homogeneous();
    x2.dot(&(f.matrix() * x1))
}
