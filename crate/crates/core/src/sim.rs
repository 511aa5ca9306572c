//! Synthetic scenes, detection noise, and the end-to-end inference chain
//! run as seeded Monte-Carlo trials.
//!
//! Each trial owns one object instance (virtual keypoints, a hidden offset
//! `o_T_p`, and a model point cloud) observed by a query pair and by
//! `n_reference_views` labeled reference pairs. Every random draw of a trial
//! comes from one stream seeded by [`trial_seed`], so results do not depend
//! on how trials are scheduled across threads.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::alignment::{average_offset, offset_transform, query_pose, AveragingParams};
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    project, random_rotation_with, so3_exp, CameraIntrinsics, Point2, Point3, RigidTransform,
    Rotation, Vec3,
};
use crate::keypoints::{
    generate_virtual_keypoints_with, regular_polyhedron, KeypointDistribution, KeypointSet2D,
    KeypointSet3D,
};
use crate::losses::{LossWeights, RefineConfig, TwoViewProblem};
use crate::metrics::{judge, MetricThresholds, ModelPoints, TrialVerdict};
use crate::pnp::{solve_pnp, Correspondences};

pub const MAX_SAMPLING_ATTEMPTS: usize = 100;

const STREAM_PNP: u64 = 0x504e_5000;
const STREAM_AVERAGE: u64 = 0x4156_4700;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_keypoints: usize,
    pub distribution: KeypointDistribution,
    /// Virtual keypoints are generated at unit scale and multiplied by this.
    pub keypoint_scale: f64,
    pub intrinsics: CameraIntrinsics,
    /// Object depth in camera 1, scene units.
    pub depth_range: (f64, f64),
    pub baseline_range: (f64, f64),
    /// Upper bound on the rotation between the two cameras of a pair.
    pub max_pair_rotation_deg: f64,
    pub pixel_noise_sigma: f64,
    /// Optional per-keypoint multipliers on `pixel_noise_sigma`
    /// (occlusion-style noise inflation). Empty means all ones.
    pub noise_multipliers: Vec<f64>,
    pub n_reference_views: usize,
    /// Fraction of reference views whose detections come from a virtual
    /// keypoint set turned by 90°.
    pub corrupted_reference_fraction: f64,
    pub symmetric_object: bool,
    pub n_trials: usize,
    pub base_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_keypoints: 8,
            distribution: KeypointDistribution::Regular,
            keypoint_scale: 0.1,
            intrinsics: CameraIntrinsics {
                fx: 572.4114,
                fy: 573.5704,
                cx: 325.2611,
                cy: 242.0490,
            },
            depth_range: (0.5, 1.5),
            baseline_range: (0.1, 0.3),
            max_pair_rotation_deg: 30.0,
            pixel_noise_sigma: 0.0,
            noise_multipliers: Vec::new(),
            n_reference_views: 1,
            corrupted_reference_fraction: 0.0,
            symmetric_object: false,
            n_trials: 100,
            base_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keypoints < 4 {
            return Err(invalid("n_keypoints", "must be at least 4"));
        }
        self.distribution.validate()?;
        if self.distribution == KeypointDistribution::Regular
            && regular_polyhedron(self.n_keypoints).is_err()
        {
            return Err(invalid(
                "n_keypoints",
                "regular layouts exist for 4, 6, 8 or 12 keypoints",
            ));
        }
        if !(self.keypoint_scale > 0.0 && self.keypoint_scale.is_finite()) {
            return Err(invalid("keypoint_scale", "must be positive"));
        }
        CameraIntrinsics::new(
            self.intrinsics.fx,
            self.intrinsics.fy,
            self.intrinsics.cx,
            self.intrinsics.cy,
        )?;
        let (dmin, dmax) = self.depth_range;
        if !(dmin > 0.0) {
            return Err(invalid("depth_min", "must be positive"));
        }
        if !(dmax >= dmin && dmax.is_finite()) {
            return Err(invalid(
                "depth_max",
                "must be finite and at least depth_min",
            ));
        }
        let (bmin, bmax) = self.baseline_range;
        if !(bmin > 0.0) {
            return Err(invalid("baseline_min", "must be positive"));
        }
        if !(bmax >= bmin && bmax.is_finite()) {
            return Err(invalid(
                "baseline_max",
                "must be finite and at least baseline_min",
            ));
        }
        if !(0.0..=180.0).contains(&self.max_pair_rotation_deg) {
            return Err(invalid("max_pair_rotation_deg", "must lie in [0, 180]"));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite()) {
            return Err(invalid("pixel_noise_sigma", "must be non-negative"));
        }
        if !self.noise_multipliers.is_empty() && self.noise_multipliers.len() != self.n_keypoints {
            return Err(invalid("noise_multipliers", "needs one entry per keypoint"));
        }
        if self
            .noise_multipliers
            .iter()
            .any(|m| !(*m >= 0.0 && m.is_finite()))
        {
            return Err(invalid("noise_multipliers", "entries must be non-negative"));
        }
        if self.n_reference_views == 0 {
            return Err(invalid("n_reference_views", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.corrupted_reference_fraction) {
            return Err(invalid(
                "corrupted_reference_fraction",
                "must lie in [0, 1)",
            ));
        }
        if self.n_trials == 0 {
            return Err(invalid("n_trials", "must be at least 1"));
        }
        Ok(())
    }

    fn corrupted_count(&self) -> usize {
        (self.corrupted_reference_fraction * self.n_reference_views as f64).round() as usize
    }

    fn noise_multiplier(&self, i: usize) -> f64 {
        self.noise_multipliers.get(i).copied().unwrap_or(1.0)
    }
}

/// splitmix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index` under `base_seed`.
pub fn trial_seed(base_seed: u64, index: usize) -> u64 {
    splitmix64(base_seed ^ splitmix64(index as u64))
}

/// Sub-stream seed derived from a trial seed.
pub fn stream_seed(seed: u64, stream: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(index as u64)))
}

/// Seed used for the PnP restarts of reference `index` (the query uses
/// `usize::MAX`).
pub fn pnp_seed(scene_seed: u64, index: usize) -> u64 {
    stream_seed(scene_seed, STREAM_PNP, index)
}

pub fn averaging_seed(scene_seed: u64) -> u64 {
    stream_seed(scene_seed, STREAM_AVERAGE, 0)
}

/// One synthetic image pair of a trial's object.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub virtual_kps: KeypointSet3D,
    /// Ground-truth `o_T_p` (virtual frame to object frame).
    pub offset: RigidTransform,
    pub model: ModelPoints,
    pub symmetric: bool,
    pub gt_object_pose_in_c1: RigidTransform,
    pub gt_object_pose_in_c2: RigidTransform,
    pub c1_t_c2: RigidTransform,
    pub exact1: KeypointSet2D,
    pub exact2: KeypointSet2D,
    pub detected1: KeypointSet2D,
    pub detected2: KeypointSet2D,
}

impl ScenePair {
    /// Copy whose detections are the exact projections.
    pub fn noiseless(&self) -> ScenePair {
        ScenePair {
            detected1: self.exact1.clone(),
            detected2: self.exact2.clone(),
            ..self.clone()
        }
    }

    /// Copy whose detections are rendered from the virtual keypoints turned
    /// by `twist` about the virtual-frame origin, keeping the original
    /// per-keypoint noise. The ground-truth label is unchanged, so the
    /// offset recovered from this view is off by `twist`.
    pub fn with_corrupted_detections(&self, twist: &Rotation) -> Result<ScenePair> {
        let turned = RigidTransform::from_rotation(*twist);
        let c1 = self.gt_object_pose_in_c1 * self.offset * turned;
        let c2 = self.gt_object_pose_in_c2 * self.offset * turned;
        let render = |pose: &RigidTransform,
                      exact: &[Point2],
                      detected: &[Point2]|
         -> Result<KeypointSet2D> {
            self.virtual_kps
                .iter()
                .zip(exact.iter().zip(detected))
                .map(|(x, (e, d))| project(&self.intrinsics, pose, x).map(|p| p + (d - e)))
                .collect()
        };
        Ok(ScenePair {
            detected1: render(&c1, &self.exact1, &self.detected1)?,
            detected2: render(&c2, &self.exact2, &self.detected2)?,
            ..self.clone()
        })
    }
}

/// Query pair plus labeled reference pairs of one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub query: ScenePair,
    pub references: Vec<ScenePair>,
    /// Indices into `references` whose detections were corrupted.
    pub corrupted: Vec<usize>,
}

struct ObjectInstance {
    virtual_kps: KeypointSet3D,
    offset: RigidTransform,
    model: ModelPoints,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    random_rotation_with(rng).rotate(&Vec3::x())
}

/// 3×3×3 grid on an asymmetric box around the object origin.
fn box_model(scale: f64) -> ModelPoints {
    let half = Vec3::new(1.0, 0.7, 0.5) * scale;
    let mut pts = Vec::with_capacity(27);
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                pts.push(Point3::new(
                    i as f64 * half.x,
                    j as f64 * half.y,
                    k as f64 * half.z,
                ));
            }
        }
    }
    ModelPoints::new(pts).expect("27 finite points")
}

fn sample_instance<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<ObjectInstance> {
    let unit = generate_virtual_keypoints_with(cfg.n_keypoints, cfg.distribution, rng)?;
    let virtual_kps = unit
        .into_iter()
        .map(|p| Point3::from(p.coords * cfg.keypoint_scale))
        .collect();
    let rotation = random_rotation_with(rng);
    let shift = Vec3::from_fn(|_, _| rng.random_range(-0.25..=0.25)) * cfg.keypoint_scale;
    Ok(ObjectInstance {
        virtual_kps,
        offset: RigidTransform::new(rotation, shift),
        model: box_model(cfg.keypoint_scale),
    })
}

fn all_in_front(pose: &RigidTransform, points: &[Point3], min_depth: f64) -> bool {
    points.iter().all(|p| pose.apply(p).z > min_depth)
}

fn sample_pair<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    inst: &ObjectInstance,
    seed: u64,
    rng: &mut R,
) -> Result<ScenePair> {
    let k = cfg.intrinsics;
    let min_depth = 0.1 * cfg.depth_range.0;
    let max_angle = cfg.max_pair_rotation_deg.to_radians();
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let rotation = random_rotation_with(rng);
        let depth = uniform(rng, cfg.depth_range);
        let u = uniform(rng, (0.5 * k.cx, 1.5 * k.cx));
        let v = uniform(rng, (0.5 * k.cy, 1.5 * k.cy));
        let c1_t_o = RigidTransform::new(rotation, k.back_project(&Point2::new(u, v)) * depth);

        let angle = uniform(rng, (0.0, max_angle));
        let axis = random_unit(rng);
        let baseline = uniform(rng, cfg.baseline_range);
        let direction = random_unit(rng);
        let c1_t_c2 = RigidTransform::new(so3_exp(&(axis * angle)), direction * baseline);
        let c2_t_o = c1_t_c2.inverse() * c1_t_o;

        let c1_t_p = c1_t_o * inst.offset;
        let c2_t_p = c2_t_o * inst.offset;
        if !(all_in_front(&c1_t_p, &inst.virtual_kps, min_depth)
            && all_in_front(&c2_t_p, &inst.virtual_kps, min_depth)
            && all_in_front(&c1_t_o, inst.model.points(), min_depth)
            && all_in_front(&c2_t_o, inst.model.points(), min_depth))
        {
            continue;
        }
        let exact1: KeypointSet2D = inst
            .virtual_kps
            .iter()
            .map(|x| project(&k, &c1_t_p, x))
            .collect::<Result<_>>()?;
        let exact2: KeypointSet2D = inst
            .virtual_kps
            .iter()
            .map(|x| project(&k, &c2_t_p, x))
            .collect::<Result<_>>()?;
        let mut perturb = |kps: &[Point2]| -> KeypointSet2D {
            kps.iter()
                .enumerate()
                .map(|(i, p)| {
                    let s = cfg.pixel_noise_sigma * cfg.noise_multiplier(i);
                    let du: f64 = rng.sample(StandardNormal);
                    let dv: f64 = rng.sample(StandardNormal);
                    Point2::new(p.x + s * du, p.y + s * dv)
                })
                .collect()
        };
        let detected1 = perturb(&exact1);
        let detected2 = perturb(&exact2);
        return Ok(ScenePair {
            seed,
            intrinsics: k,
            virtual_kps: inst.virtual_kps.clone(),
            offset: inst.offset,
            model: inst.model.clone(),
            symmetric: cfg.symmetric_object,
            gt_object_pose_in_c1: c1_t_o,
            gt_object_pose_in_c2: c2_t_o,
            c1_t_c2,
            exact1,
            exact2,
            detected1,
            detected2,
        });
    }
    Err(Error::SamplingExhausted(MAX_SAMPLING_ATTEMPTS))
}

/// One pair of a fresh object instance.
pub fn sample_scene(cfg: &SceneConfig, seed: u64) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = sample_instance(cfg, &mut rng)?;
    sample_pair(cfg, &inst, seed, &mut rng)
}

/// A query pair and the configured number of reference pairs, all of the
/// same object instance.
pub fn sample_trial(cfg: &SceneConfig, seed: u64) -> Result<Trial> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = sample_instance(cfg, &mut rng)?;
    let query = sample_pair(cfg, &inst, seed, &mut rng)?;
    let n_refs = cfg.n_reference_views;
    let mut corrupted =
        sample_indices(&mut rng, n_refs, cfg.corrupted_count().min(n_refs)).into_vec();
    corrupted.sort_unstable();

    let mut references = Vec::with_capacity(n_refs);
    for j in 0..n_refs {
        let mut attempts = 0;
        let pair = loop {
            let pair = sample_pair(cfg, &inst, seed, &mut rng)?;
            if !corrupted.contains(&j) {
                break pair;
            }
            let twist = so3_exp(&(random_unit(&mut rng) * std::f64::consts::FRAC_PI_2));
            match pair.with_corrupted_detections(&twist) {
                Ok(p) => break p,
                Err(Error::BehindCamera { .. }) if attempts < MAX_SAMPLING_ATTEMPTS => {
                    attempts += 1
                }
                Err(Error::BehindCamera { .. }) => {
                    return Err(Error::SamplingExhausted(MAX_SAMPLING_ATTEMPTS))
                }
                Err(e) => return Err(e),
            }
        };
        references.push(pair);
    }
    Ok(Trial {
        query,
        references,
        corrupted,
    })
}

/// Outcome of one trial. Failed trials carry no verdict and fail every
/// criterion.
type TrialOutcome = (TrialReport, Option<(f64, f64, TrialReport)>);

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub estimate: Option<RigidTransform>,
    pub verdict: Option<TrialVerdict>,
    pub failure: Option<String>,
}

impl TrialReport {
    fn from_result(
        trial: usize,
        seed: u64,
        result: Result<(RigidTransform, TrialVerdict)>,
    ) -> Self {
        match result {
            Ok((estimate, verdict)) => TrialReport {
                trial,
                seed,
                estimate: Some(estimate),
                verdict: Some(verdict),
                failure: None,
            },
            Err(e) => TrialReport {
                trial,
                seed,
                estimate: None,
                verdict: None,
                failure: Some(e.to_string()),
            },
        }
    }

    pub fn failed(&self) -> bool {
        self.verdict.is_none()
    }

    fn value(&self, f: impl Fn(&TrialVerdict) -> f64) -> f64 {
        self.verdict.as_ref().map_or(f64::NAN, f)
    }

    fn flag(&self, f: impl Fn(&TrialVerdict) -> bool) -> bool {
        self.verdict.as_ref().is_some_and(f)
    }

    pub fn rot_deg(&self) -> f64 {
        self.value(|v| v.rot_deg)
    }
    pub fn trans(&self) -> f64 {
        self.value(|v| v.trans)
    }
    pub fn add(&self) -> f64 {
        self.value(|v| v.add)
    }
    pub fn adds(&self) -> f64 {
        self.value(|v| v.adds)
    }
    pub fn proj_px(&self) -> f64 {
        self.value(|v| v.proj_px)
    }
    pub fn pass_add(&self) -> bool {
        self.flag(|v| v.pass_add)
    }
    pub fn pass_adds(&self) -> bool {
        self.flag(|v| v.pass_adds)
    }
    pub fn pass_proj(&self) -> bool {
        self.flag(|v| v.pass_proj)
    }
    pub fn pass_degcm(&self) -> bool {
        self.flag(|v| v.pass_degcm)
    }
}

/// Camera-from-virtual pose of view 1 of `scene`.
fn reference_virtual_pose(scene: &ScenePair, index: usize) -> Result<RigidTransform> {
    let c = Correspondences::new(scene.virtual_kps.clone(), scene.detected1.clone())?;
    solve_pnp(&c, &scene.intrinsics, pnp_seed(scene.seed, index))
}

fn estimate_query_pose(
    query_detections: &KeypointSet2D,
    scene: &ScenePair,
    references: &[ScenePair],
    params: &AveragingParams,
) -> Result<RigidTransform> {
    if references.is_empty() {
        return Err(Error::EmptyInput);
    }
    let offsets = references
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let c1_t_p = reference_virtual_pose(r, j)?;
            Ok(offset_transform(&r.gt_object_pose_in_c1, &c1_t_p.inverse()))
        })
        .collect::<Result<Vec<_>>>()?;
    let t_a = if offsets.len() == 1 {
        offsets[0]
    } else {
        average_offset(&offsets, params, averaging_seed(scene.seed))?
    };
    let c = Correspondences::new(scene.virtual_kps.clone(), query_detections.clone())?;
    let c2_t_p = solve_pnp(&c, &scene.intrinsics, pnp_seed(scene.seed, usize::MAX))?;
    Ok(query_pose(&c2_t_p.inverse(), &t_a))
}

fn score(
    estimate: RigidTransform,
    scene: &ScenePair,
    th: &MetricThresholds,
) -> Result<(RigidTransform, TrialVerdict)> {
    let v = judge(
        &scene.model,
        &scene.intrinsics,
        &estimate,
        &scene.gt_object_pose_in_c2,
        th,
        scene.symmetric,
    )?;
    Ok((estimate, v))
}

/// Object pose in the query camera (view 2 of `scene`) from PnP on the
/// query detections and the offset recovered from the references.
pub fn run_inference_trial(
    scene: &ScenePair,
    references: &[ScenePair],
    params: &AveragingParams,
    th: &MetricThresholds,
) -> TrialReport {
    run_inference_trial_indexed(0, scene, references, params, th)
}

fn run_inference_trial_indexed(
    trial: usize,
    scene: &ScenePair,
    references: &[ScenePair],
    params: &AveragingParams,
    th: &MetricThresholds,
) -> TrialReport {
    let result = estimate_query_pose(&scene.detected2, scene, references, params)
        .and_then(|e| score(e, scene, th));
    TrialReport::from_result(trial, scene.seed, result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutcome {
    pub kps1: KeypointSet2D,
    pub kps2: KeypointSet2D,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Inference on the refined query detections.
    pub report: TrialReport,
    /// Inference on the unrefined detections with the same reference.
    pub baseline: TrialReport,
}

/// Refines both views' detections against the weak-supervision objective,
/// then runs inference on the refined view-2 detections with a noiseless
/// reference.
pub fn run_training_surrogate_trial(
    scene: &ScenePair,
    reference: &ScenePair,
    w: &LossWeights,
    cfg: &RefineConfig,
    params: &AveragingParams,
    th: &MetricThresholds,
) -> Result<SurrogateOutcome> {
    run_surrogate_indexed(0, scene, reference, w, cfg, params, th)
}

fn run_surrogate_indexed(
    trial: usize,
    scene: &ScenePair,
    reference: &ScenePair,
    w: &LossWeights,
    cfg: &RefineConfig,
    params: &AveragingParams,
    th: &MetricThresholds,
) -> Result<SurrogateOutcome> {
    let problem = TwoViewProblem::new(
        scene.virtual_kps.clone(),
        &scene.intrinsics,
        &scene.intrinsics,
        &scene.c1_t_c2,
    )?;
    let out = problem.refine(&scene.detected1, &scene.detected2, w, cfg)?;
    let references = [reference.noiseless()];
    let refined = estimate_query_pose(&out.kps2, scene, &references, params)
        .and_then(|e| score(e, scene, th));
    let unrefined = estimate_query_pose(&scene.detected2, scene, &references, params)
        .and_then(|e| score(e, scene, th));
    Ok(SurrogateOutcome {
        kps1: out.kps1,
        kps2: out.kps2,
        initial_loss: out.initial_loss,
        final_loss: out.final_loss,
        report: TrialReport::from_result(trial, scene.seed, refined),
        baseline: TrialReport::from_result(trial, scene.seed, unrefined),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub median: f64,
    pub p90: f64,
}

impl Spread {
    /// Linear-interpolation percentiles of the finite values; NaN when
    /// there are none.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Spread {
        let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        Spread {
            median: percentile(&v, 0.5),
            p90: percentile(&v, 0.9),
        }
    }
}

/// `q`-quantile of sorted data, interpolating between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSummary {
    pub median_initial_loss: f64,
    pub median_final_loss: f64,
    /// Fraction of trials whose final loss is below the initial loss.
    pub loss_reduced_rate: f64,
    /// Errors of the same trials run on the unrefined detections.
    pub baseline_rot_deg: Spread,
    pub baseline_trans: Spread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub n_trials: usize,
    pub n_failed: usize,
    pub pass_rate_add: f64,
    pub pass_rate_adds: f64,
    pub pass_rate_proj: f64,
    pub pass_rate_degcm: f64,
    pub rot_deg: Spread,
    pub trans: Spread,
    pub add: Spread,
    pub adds: Spread,
    pub proj_px: Spread,
    pub surrogate: Option<SurrogateSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub trials: Vec<TrialReport>,
    pub summary: ExperimentSummary,
}

fn rate(trials: &[TrialReport], f: impl Fn(&TrialReport) -> bool) -> f64 {
    trials.iter().filter(|t| f(t)).count() as f64 / trials.len() as f64
}

fn summarize(trials: &[TrialReport], surrogate: Option<SurrogateSummary>) -> ExperimentSummary {
    ExperimentSummary {
        n_trials: trials.len(),
        n_failed: trials.iter().filter(|t| t.failed()).count(),
        pass_rate_add: rate(trials, TrialReport::pass_add),
        pass_rate_adds: rate(trials, TrialReport::pass_adds),
        pass_rate_proj: rate(trials, TrialReport::pass_proj),
        pass_rate_degcm: rate(trials, TrialReport::pass_degcm),
        rot_deg: Spread::of(trials.iter().map(TrialReport::rot_deg)),
        trans: Spread::of(trials.iter().map(TrialReport::trans)),
        add: Spread::of(trials.iter().map(TrialReport::add)),
        adds: Spread::of(trials.iter().map(TrialReport::adds)),
        proj_px: Spread::of(trials.iter().map(TrialReport::proj_px)),
        surrogate,
    }
}

fn failed_report(trial: usize, seed: u64, e: Error) -> TrialReport {
    TrialReport::from_result(trial, seed, Err(e))
}

/// Runs `cfg.n_trials` independent trials on the current rayon pool.
/// Output is identical for any pool size.
pub fn run_experiment(
    cfg: &SceneConfig,
    params: &AveragingParams,
    th: &MetricThresholds,
    w: &LossWeights,
    refine_cfg: &RefineConfig,
    mode: Mode,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    params.validate()?;
    th.validate()?;
    w.validate()?;
    refine_cfg.validate()?;

    match mode {
        Mode::Inference => {
            let trials: Vec<TrialReport> = (0..cfg.n_trials)
                .into_par_iter()
                .map(|i| {
                    let seed = trial_seed(cfg.base_seed, i);
                    match sample_trial(cfg, seed) {
                        Ok(t) => {
                            run_inference_trial_indexed(i, &t.query, &t.references, params, th)
                        }
                        Err(e) => failed_report(i, seed, e),
                    }
                })
                .collect();
            let summary = summarize(&trials, None);
            Ok(ExperimentReport { trials, summary })
        }
        Mode::Surrogate => {
            let outcomes: Vec<TrialOutcome> = (0..cfg.n_trials)
                .into_par_iter()
                .map(|i| {
                    let seed = trial_seed(cfg.base_seed, i);
                    let outcome = sample_trial(cfg, seed).and_then(|t| {
                        run_surrogate_indexed(
                            i,
                            &t.query,
                            &t.references[0],
                            w,
                            refine_cfg,
                            params,
                            th,
                        )
                    });
                    match outcome {
                        Ok(o) => (o.report, Some((o.initial_loss, o.final_loss, o.baseline))),
                        Err(e) => (failed_report(i, seed, e), None),
                    }
                })
                .collect();
            let (trials, refined): (Vec<TrialReport>, Vec<_>) = outcomes.into_iter().unzip();
            let refined: Vec<(f64, f64, TrialReport)> = refined.into_iter().flatten().collect();
            let surrogate = SurrogateSummary {
                median_initial_loss: Spread::of(refined.iter().map(|l| l.0)).median,
                median_final_loss: Spread::of(refined.iter().map(|l| l.1)).median,
                loss_reduced_rate: refined.iter().filter(|l| l.1 < l.0).count() as f64
                    / trials.len() as f64,
                baseline_rot_deg: Spread::of(refined.iter().map(|l| l.2.rot_deg())),
                baseline_trans: Spread::of(refined.iter().map(|l| l.2.trans())),
            };
            let summary = summarize(&trials, Some(surrogate));
            Ok(ExperimentReport { trials, summary })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.5);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert!(percentile(&[], 0.5).is_nan());
        let s = Spread::of([f64::NAN, 3.0, 1.0, 2.0]);
        assert_eq!(s.median, 2.0);
    }

    #[test]
    fn trial_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..1000).map(|i| trial_seed(7, i)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 1000);
        assert_eq!(trial_seed(7, 3), seeds[3]);
        assert_ne!(trial_seed(8, 3), seeds[3]);
    }

    #[test]
    fn config_validation_names_the_key() {
        let cfg = SceneConfig {
            pixel_noise_sigma: -1.0,
            ..SceneConfig::default()
        };
        match cfg.validate() {
            Err(Error::InvalidParameter { name, .. }) => assert_eq!(name, "pixel_noise_sigma"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = SceneConfig {
            n_keypoints: 3,
            ..SceneConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SceneConfig {
            depth_range: (0.0, 1.0),
            ..SceneConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_noise_detections_are_exact() {
        let s = sample_scene(&SceneConfig::default(), 11).unwrap();
        assert_eq!(s.detected1, s.exact1);
        assert_eq!(s.detected2, s.exact2);
    }

    #[test]
    fn noise_multipliers_inflate_selected_keypoints() {
        let mut mult = vec![0.0; 8];
        mult[2] = 3.0;
        let cfg = SceneConfig {
            pixel_noise_sigma: 1.0,
            noise_multipliers: mult,
            ..SceneConfig::default()
        };
        let s = sample_scene(&cfg, 4).unwrap();
        for i in 0..8 {
            let moved = (s.detected1[i] - s.exact1[i]).norm() > 0.0;
            assert_eq!(moved, i == 2);
        }
    }
}
