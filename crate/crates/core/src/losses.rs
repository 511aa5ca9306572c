//! Weak-supervision objective over a pair of 2D keypoint sets: the
//! registration loss (triangulate, align to the virtual keypoints, mean
//! residual), the epipolar consistency loss, their weighted sum, a central
//! finite-difference gradient, and a gradient-descent keypoint refiner that
//! stands in for network training.

use crate::alignment::kabsch;
use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraIntrinsics, Point2, Point3, RigidTransform};
use crate::keypoints::{KeypointSet2D, KeypointSet3D};
use crate::twoview::{
    epipolar_residual, fundamental_matrix, projection_pair, triangulate, FundamentalMatrix,
    ProjectionMatrix,
};

/// Loss values at or below this are treated as already optimal by the
/// refiner.
pub const LOSS_FLOOR: f64 = 1e-7;
const MAX_HALVINGS: usize = 30;

/// Per-keypoint penalty applied to the epipolar residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EpipolarPenalty {
    #[default]
    Absolute,
    Squared,
}

impl EpipolarPenalty {
    fn apply(self, r: f64) -> f64 {
        match self {
            EpipolarPenalty::Absolute => r.abs(),
            EpipolarPenalty::Squared => r * r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub epipolar: EpipolarPenalty,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 100.0,
            lambda2: 100.0,
            epipolar: EpipolarPenalty::Absolute,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(invalid("lambda1", "must be non-negative"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(invalid("lambda2", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Initial step, in pixels per unit gradient.
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Central-difference step in pixels.
    pub fd_step: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            step_size: 0.5,
            max_iters: 500,
            grad_tol: 1e-8,
            fd_step: 1e-4,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(invalid("step_size", "must be positive"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(invalid("grad_tol", "must be positive"));
        }
        if !(self.fd_step > 0.0) {
            return Err(invalid("fd_step", "must be positive"));
        }
        Ok(())
    }
}

/// Fixed quantities of one training pair: virtual keypoints, projection
/// matrices and the fundamental matrix.
#[derive(Debug, Clone)]
pub struct TwoViewProblem {
    virtual_kps: KeypointSet3D,
    p1: ProjectionMatrix,
    p2: ProjectionMatrix,
    f: FundamentalMatrix,
}

impl TwoViewProblem {
    pub fn new(
        virtual_kps: KeypointSet3D,
        k1: &CameraIntrinsics,
        k2: &CameraIntrinsics,
        c1_t_c2: &RigidTransform,
    ) -> Result<Self> {
        let (p1, p2) = projection_pair(k1, k2, c1_t_c2);
        let f = fundamental_matrix(k1, k2, c1_t_c2)?;
        Ok(TwoViewProblem {
            virtual_kps,
            p1,
            p2,
            f,
        })
    }

    pub fn virtual_keypoints(&self) -> &[Point3] {
        &self.virtual_kps
    }

    pub fn fundamental(&self) -> &FundamentalMatrix {
        &self.f
    }

    fn check_lengths(&self, kps1: &[Point2], kps2: &[Point2]) -> Result<()> {
        if kps1.len() != kps2.len() {
            return Err(Error::LengthMismatch(kps1.len(), kps2.len()));
        }
        if kps1.len() != self.virtual_kps.len() {
            return Err(Error::LengthMismatch(kps1.len(), self.virtual_kps.len()));
        }
        Ok(())
    }

    pub fn triangulate_all(&self, kps1: &[Point2], kps2: &[Point2]) -> Result<Vec<Point3>> {
        kps1.iter()
            .zip(kps2)
            .map(|(a, b)| triangulate(a, b, &self.p1, &self.p2))
            .collect()
    }

    /// Mean distance between triangulated points and the Kabsch-aligned
    /// virtual keypoints, with the alignment used.
    pub fn registration(&self, kps1: &[Point2], kps2: &[Point2]) -> Result<(f64, RigidTransform)> {
        self.check_lengths(kps1, kps2)?;
        let tri = self.triangulate_all(kps1, kps2)?;
        self.registration_from_points(&tri)
    }

    fn registration_from_points(&self, tri: &[Point3]) -> Result<(f64, RigidTransform)> {
        let t_o = kabsch(&self.virtual_kps, tri)?;
        let loss = tri
            .iter()
            .zip(&self.virtual_kps)
            .map(|(x_hat, x)| (x_hat - t_o.apply(x)).norm())
            .sum::<f64>()
            / tri.len() as f64;
        Ok((loss, t_o))
    }

    pub fn consistency(&self, kps1: &[Point2], kps2: &[Point2], penalty: EpipolarPenalty) -> f64 {
        consistency_loss_with(kps1, kps2, &self.f, penalty)
    }

    pub fn total(&self, kps1: &[Point2], kps2: &[Point2], w: &LossWeights) -> Result<f64> {
        self.check_lengths(kps1, kps2)?;
        let tri = self.triangulate_all(kps1, kps2)?;
        self.total_from_points(&tri, kps1, kps2, w)
    }

    fn total_from_points(
        &self,
        tri: &[Point3],
        kps1: &[Point2],
        kps2: &[Point2],
        w: &LossWeights,
    ) -> Result<f64> {
        let (reg, _) = self.registration_from_points(tri)?;
        let con = self.consistency(kps1, kps2, w.epipolar);
        Ok(w.lambda1 * reg + w.lambda2 * con)
    }

    /// Central differences of [`Self::total`] over the `4N` pixel
    /// coordinates, ordered `u¹₀, v¹₀, …, u¹ₙ, v¹ₙ, u²₀, v²₀, …`.
    ///
    /// Each perturbation re-triangulates only the keypoint it touches; the
    /// other triangulations are deterministic and reused as-is.
    pub fn gradient(
        &self,
        kps1: &[Point2],
        kps2: &[Point2],
        w: &LossWeights,
        fd_step: f64,
    ) -> Result<Vec<f64>> {
        self.check_lengths(kps1, kps2)?;
        let n = kps1.len();
        let base_tri = self.triangulate_all(kps1, kps2)?;
        let mut grad = Vec::with_capacity(4 * n);
        let mut a = kps1.to_vec();
        let mut b = kps2.to_vec();
        let mut tri = base_tri.clone();
        for view in 0..2 {
            for i in 0..n {
                for axis in 0..2 {
                    let mut eval = |delta: f64| -> Result<f64> {
                        let pts = if view == 0 { &mut a } else { &mut b };
                        let orig = pts[i][axis];
                        pts[i][axis] = orig + delta;
                        tri[i] = triangulate(&a[i], &b[i], &self.p1, &self.p2)?;
                        let value = self.total_from_points(&tri, &a, &b, w);
                        let pts = if view == 0 { &mut a } else { &mut b };
                        pts[i][axis] = orig;
                        tri[i] = base_tri[i];
                        value
                    };
                    let plus = eval(fd_step)?;
                    let minus = eval(-fd_step)?;
                    grad.push((plus - minus) / (2.0 * fd_step));
                }
            }
        }
        Ok(grad)
    }

    /// Gradient descent with a halving line search. The loss sequence is
    /// non-increasing; the result never has a larger loss than the input.
    pub fn refine(
        &self,
        kps1: &[Point2],
        kps2: &[Point2],
        w: &LossWeights,
        cfg: &RefineConfig,
    ) -> Result<RefineOutcome> {
        cfg.validate()?;
        let n = kps1.len();
        let mut a = kps1.to_vec();
        let mut b = kps2.to_vec();
        let mut loss = self.total(&a, &b, w)?;
        let initial_loss = loss;
        let mut history = vec![loss];
        let mut iterations = 0;

        while iterations < cfg.max_iters {
            let g = self.gradient(&a, &b, w, cfg.fd_step)?;
            let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if gnorm < cfg.grad_tol {
                break;
            }
            let mut step = cfg.step_size;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let ca = shifted(&a, &g[..2 * n], step);
                let cb = shifted(&b, &g[2 * n..], step);
                if let Ok(value) = self.total(&ca, &cb, w) {
                    if value < loss {
                        accepted = Some((ca, cb, value));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((ca, cb, value)) = accepted else {
                if iterations == 0 && loss > LOSS_FLOOR {
                    return Err(Error::NoDescent);
                }
                break;
            };
            a = ca;
            b = cb;
            loss = value;
            history.push(loss);
            iterations += 1;
        }

        Ok(RefineOutcome {
            kps1: a,
            kps2: b,
            initial_loss,
            final_loss: loss,
            iterations,
            history,
        })
    }
}

fn shifted(kps: &[Point2], grad: &[f64], step: f64) -> Vec<Point2> {
    kps.iter()
        .enumerate()
        .map(|(i, p)| Point2::new(p.x - step * grad[2 * i], p.y - step * grad[2 * i + 1]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub kps1: KeypointSet2D,
    pub kps2: KeypointSet2D,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Accepted descent steps.
    pub iterations: usize,
    /// Loss after each accepted step, starting with the initial loss.
    pub history: Vec<f64>,
}

pub fn registration_loss(
    kps1: &KeypointSet2D,
    kps2: &KeypointSet2D,
    virtual_kps: &KeypointSet3D,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    c1_t_c2: &RigidTransform,
) -> Result<(f64, RigidTransform)> {
    if kps1.len() != kps2.len() || kps1.len() != virtual_kps.len() {
        return Err(Error::LengthMismatch(kps1.len(), virtual_kps.len()));
    }
    let (p1, p2) = projection_pair(k1, k2, c1_t_c2);
    let tri = kps1
        .iter()
        .zip(kps2)
        .map(|(a, b)| triangulate(a, b, &p1, &p2))
        .collect::<Result<Vec<_>>>()?;
    let t_o = kabsch(virtual_kps, &tri)?;
    let loss = tri
        .iter()
        .zip(virtual_kps)
        .map(|(x_hat, x)| (x_hat - t_o.apply(x)).norm())
        .sum::<f64>()
        / tri.len() as f64;
    Ok((loss, t_o))
}

/// Mean absolute epipolar residual.
pub fn consistency_loss(kps1: &KeypointSet2D, kps2: &KeypointSet2D, f: &FundamentalMatrix) -> f64 {
    consistency_loss_with(kps1, kps2, f, EpipolarPenalty::Absolute)
}

pub fn consistency_loss_with(
    kps1: &[Point2],
    kps2: &[Point2],
    f: &FundamentalMatrix,
    penalty: EpipolarPenalty,
) -> f64 {
    if kps1.is_empty() {
        return 0.0;
    }
    kps1.iter()
        .zip(kps2)
        .map(|(a, b)| penalty.apply(epipolar_residual(a, b, f)))
        .sum::<f64>()
        / kps1.len() as f64
}

pub fn total_loss(
    kps1: &KeypointSet2D,
    kps2: &KeypointSet2D,
    virtual_kps: &KeypointSet3D,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    c1_t_c2: &RigidTransform,
    w: &LossWeights,
) -> Result<f64> {
    TwoViewProblem::new(virtual_kps.clone(), k1, k2, c1_t_c2)?.total(kps1, kps2, w)
}

#[allow(clippy::too_many_arguments)]
pub fn loss_gradient(
    kps1: &KeypointSet2D,
    kps2: &KeypointSet2D,
    virtual_kps: &KeypointSet3D,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    c1_t_c2: &RigidTransform,
    w: &LossWeights,
    fd_step: f64,
) -> Result<Vec<f64>> {
    TwoViewProblem::new(virtual_kps.clone(), k1, k2, c1_t_c2)?.gradient(kps1, kps2, w, fd_step)
}

#[allow(clippy::too_many_arguments)]
pub fn refine_keypoints(
    initial_kps1: &KeypointSet2D,
    initial_kps2: &KeypointSet2D,
    virtual_kps: &KeypointSet3D,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    c1_t_c2: &RigidTransform,
    w: &LossWeights,
    cfg: &RefineConfig,
) -> Result<(KeypointSet2D, KeypointSet2D, f64)> {
    let out = TwoViewProblem::new(virtual_kps.clone(), k1, k2, c1_t_c2)?.refine(
        initial_kps1,
        initial_kps2,
        w,
        cfg,
    )?;
    Ok((out.kps1, out.kps2, out.final_loss))
}
