#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Keypoint-based 6-DoF object pose estimation from virtual keypoints:
//! two-view geometry, PnP, transform averaging, weak-supervision losses,
//! pose metrics and a seeded Monte-Carlo simulator.

pub mod alignment;
pub mod error;
pub mod geometry;
pub mod keypoints;
pub mod losses;
pub mod metrics;
pub mod pnp;
pub mod sim;
pub mod twoview;

pub use alignment::{average_offset, kabsch, offset_transform, query_pose, AveragingParams};
pub use error::{Error, Result};
pub use geometry::{
    compose, project, CameraIntrinsics, Point2, Point3, RigidTransform, Rotation, Vec3,
};
pub use keypoints::{
    generate_virtual_keypoints, KeypointDistribution, KeypointSet2D, KeypointSet3D,
};
pub use losses::{LossWeights, RefineConfig, TwoViewProblem};
pub use metrics::{judge, MetricThresholds, ModelPoints, TrialVerdict};
pub use pnp::{solve_pnp, Correspondences};
pub use sim::{run_experiment, Mode, SceneConfig, ScenePair};
