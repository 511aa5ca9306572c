//! SO(3)/SE(3) value types, exponential and logarithm maps, and pinhole
//! projection.
//!
//! Rotations are stored as plain 3x3 matrices. Transforms follow the
//! `a_T_b` convention: `a_T_b.apply(p)` maps a point expressed in frame `b`
//! into frame `a`, and `compose(a_T_b, b_T_c) = a_T_c`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Point3 = nalgebra::Point3<f64>;
pub type Point2 = nalgebra::Point2<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;
/// Points at or below this camera-frame depth are rejected by [`project`].
pub const DEPTH_EPS: f64 = 1e-9;

const SMALL_ANGLE: f64 = 1e-4;

/// Skew-symmetric cross-product matrix: `skew(a) * b == a.cross(&b)`.
#[rustfmt::skip]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

/// Element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates orthonormality and a positive determinant.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let ortho = (m * m.transpose() - Mat3::identity()).norm();
        let det = m.determinant();
        if !(ortho <= ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::NotARotation { ortho, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix that the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Nearest rotation in the Frobenius sense, with the determinant forced
    /// to +1.
    pub fn nearest(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let d = (u * v_t).determinant().signum();
        let corr = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
        Rotation(u * corr * v_t)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn log(&self) -> Vec3 {
        so3_log(self)
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Geodesic distance `‖log(selfᵀ · other)‖` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).angle()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Rodrigues' formula. The zero vector maps to the identity.
pub fn so3_exp(v: &Vec3) -> Rotation {
    let theta2 = v.norm_squared();
    let k = skew(v);
    let k2 = k * k;
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Mat3::identity() + k * a + k2 * b)
}

/// Axis-angle vector with norm in `[0, π]`.
pub fn so3_log(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    // w = sin(θ)·axis
    let w = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5;
    let s = w.norm();
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE {
        return w * (1.0 + theta * theta / 6.0);
    }
    if PI - theta < SMALL_ANGLE {
        // Axis is the eigenvector of the symmetric part with eigenvalue +1.
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let (idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
            .expect("three eigenvalues");
        let mut axis: Vec3 = eig.eigenvectors.column(idx).into_owned().normalize();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    w * (theta / s)
}

/// Haar-uniform rotation from a seeded stream.
pub fn random_rotation(seed: u64) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

/// Haar-uniform rotation: a normalized 4D Gaussian is uniform on S³.
pub fn random_rotation_with<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n2: f64 = q.iter().map(|x| x * x).sum();
        if n2 > 1e-12 {
            let uq =
                UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
            return Rotation(uq.to_rotation_matrix().into_inner());
        }
    }
}

/// Element of SE(3): `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vec3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt.rotate(&self.translation)))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation.rotate(&p.coords) + self.translation)
    }

    /// Rotation geodesic (radians) and translation distance to `other`.
    pub fn distance_to(&self, other: &RigidTransform) -> (f64, f64) {
        (
            self.rotation.angle_to(&other.rotation),
            (self.translation - other.translation).norm(),
        )
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

/// Pinhole calibration with zero skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fx.is_finite()) {
            return Err(crate::error::invalid("fx", "must be positive and finite"));
        }
        if !(fy > 0.0 && fy.is_finite()) {
            return Err(crate::error::invalid("fy", "must be positive and finite"));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(crate::error::invalid("cx/cy", "must be finite"));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Unit focal lengths, principal point at the origin.
    pub fn identity() -> Self {
        CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    #[rustfmt::skip]
    pub fn matrix(&self) -> Mat3 {
        Mat3::new(
            self.fx, 0.0,     self.cx,
            0.0,     self.fy, self.cy,
            0.0,     0.0,     1.0,
        )
    }

    #[rustfmt::skip]
    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx, 0.0,           -self.cx / self.fx,
            0.0,           1.0 / self.fy, -self.cy / self.fy,
            0.0,           0.0,           1.0,
        )
    }

    /// Projects a camera-frame point.
    pub fn project_camera_point(&self, p: &Point3) -> Result<Point2> {
        if p.z <= DEPTH_EPS {
            return Err(Error::BehindCamera { depth: p.z });
        }
        Ok(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Normalized ray `K⁻¹·[u, v, 1]` with unit third coordinate.
    pub fn back_project(&self, px: &Point2) -> Vec3 {
        Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

/// Pixel of an object-frame point under the camera-from-object pose.
pub fn project(k: &CameraIntrinsics, cam_from_obj: &RigidTransform, p: &Point3) -> Result<Point2> {
    k.project_camera_point(&cam_from_obj.apply(p))
}
