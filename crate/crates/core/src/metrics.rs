//! Pose-accuracy metrics: ADD, ADD-S, 2D projection error and the n°-m cm
//! rotation/translation errors, plus the thresholded verdict for a trial.

use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraIntrinsics, Point3, RigidTransform};

/// Surrogate object model in the object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoints(Vec<Point3>);

impl ModelPoints {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::TooFewPoints {
                needed: 2,
                got: points.len(),
            });
        }
        if points
            .iter()
            .any(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(invalid("model points", "must be finite"));
        }
        Ok(ModelPoints(points))
    }

    pub fn points(&self) -> &[Point3] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricThresholds {
    /// ADD(-S) must be below this fraction of the model diameter.
    pub add_fraction: f64,
    /// Mean reprojection distance limit (pixels).
    pub proj_pixels: f64,
    /// Rotation error limit (degrees).
    pub rot_deg: f64,
    /// Translation error limit (scene units; 0.05 is 5 cm in meters).
    pub trans: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            add_fraction: 0.10,
            proj_pixels: 5.0,
            rot_deg: 5.0,
            trans: 0.05,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("add_fraction", self.add_fraction),
            ("proj_pixels", self.proj_pixels),
            ("rot_deg", self.rot_deg),
            ("trans_threshold", self.trans),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be positive"));
            }
        }
        Ok(())
    }
}

pub fn add_metric(m: &ModelPoints, pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    let pts = m.points();
    pts.iter()
        .map(|x| (pred.apply(x) - gt.apply(x)).norm())
        .sum::<f64>()
        / pts.len() as f64
}

/// Mean distance from each predicted point to the closest ground-truth point
/// (exhaustive search).
pub fn adds_metric(m: &ModelPoints, pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    let pts = m.points();
    let gt_pts: Vec<Point3> = pts.iter().map(|x| gt.apply(x)).collect();
    pts.iter()
        .map(|x| {
            let p = pred.apply(x);
            gt_pts
                .iter()
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / pts.len() as f64
}

/// Largest pairwise distance between model points.
pub fn model_diameter(m: &ModelPoints) -> f64 {
    let pts = m.points();
    let mut best: f64 = 0.0;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.max((a - b).norm());
        }
    }
    best
}

/// Mean pixel distance between model points projected under both poses.
pub fn projection_metric(
    m: &ModelPoints,
    k: &CameraIntrinsics,
    pred: &RigidTransform,
    gt: &RigidTransform,
) -> Result<f64> {
    let pts = m.points();
    let mut total = 0.0;
    for x in pts {
        let a = k.project_camera_point(&pred.apply(x))?;
        let b = k.project_camera_point(&gt.apply(x))?;
        total += (a - b).norm();
    }
    Ok(total / pts.len() as f64)
}

/// Rotation error in degrees and translation error in scene units.
pub fn pose_errors(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let (rot, trans) = pred.distance_to(gt);
    (rot.to_degrees(), trans)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialVerdict {
    pub add: f64,
    pub adds: f64,
    pub proj_px: f64,
    pub rot_deg: f64,
    pub trans: f64,
    pub diameter: f64,
    /// ADD below the diameter fraction, or ADD-S for symmetric objects.
    pub pass_add: bool,
    /// ADD-S below the diameter fraction regardless of symmetry.
    pub pass_adds: bool,
    pub pass_proj: bool,
    pub pass_degcm: bool,
}

pub fn judge(
    m: &ModelPoints,
    k: &CameraIntrinsics,
    pred: &RigidTransform,
    gt: &RigidTransform,
    th: &MetricThresholds,
    symmetric: bool,
) -> Result<TrialVerdict> {
    let add = add_metric(m, pred, gt);
    let adds = adds_metric(m, pred, gt);
    let proj_px = projection_metric(m, k, pred, gt)?;
    let (rot_deg, trans) = pose_errors(pred, gt);
    let diameter = model_diameter(m);
    let limit = th.add_fraction * diameter;
    Ok(TrialVerdict {
        add,
        adds,
        proj_px,
        rot_deg,
        trans,
        diameter,
        pass_add: if symmetric { adds < limit } else { add < limit },
        pass_adds: adds < limit,
        pass_proj: proj_px < th.proj_pixels,
        pass_degcm: rot_deg < th.rot_deg && trans < th.trans,
    })
}
