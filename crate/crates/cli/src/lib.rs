//! Configuration, report writers and subcommands of the `pose-sim` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use posekit::alignment::AveragingParams;
use posekit::geometry::CameraIntrinsics;
use posekit::keypoints::KeypointDistribution;
use posekit::losses::{EpipolarPenalty, LossWeights, RefineConfig};
use posekit::metrics::MetricThresholds;
use posekit::sim::{
    run_experiment, ExperimentReport, ExperimentSummary, Mode, SceneConfig, Spread, TrialReport,
};
use serde::{Deserialize, Serialize};

pub const THREADS_ENV: &str = "POSE_SIM_THREADS";

pub const CSV_HEADER: [&str; 11] = [
    "trial",
    "seed",
    "rot_deg",
    "trans",
    "add",
    "adds",
    "proj_px",
    "pass_add",
    "pass_proj",
    "pass_degcm",
    "failed_reason",
];

pub const SWEEP_HEADER: [&str; 16] = [
    "param",
    "value",
    "n_trials",
    "n_failed",
    "pass_rate_add",
    "pass_rate_adds",
    "pass_rate_proj",
    "pass_rate_degcm",
    "median_rot_deg",
    "p90_rot_deg",
    "median_trans",
    "p90_trans",
    "median_add",
    "p90_add",
    "median_proj_px",
    "p90_proj_px",
];

pub const SWEEP_PARAMS: [&str; 4] = [
    "n_keypoints",
    "distribution",
    "pixel_noise_sigma",
    "n_reference_views",
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("unknown sweep parameter `{0}` (supported: n_keypoints, distribution, pixel_noise_sigma, n_reference_views)")]
    UnknownParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::UnknownParameter(_) => 2,
            CliError::Io { .. } => 3,
        }
    }

    fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Flat JSON configuration. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub mode: String,
    pub n_trials: usize,
    pub base_seed: u64,

    pub n_keypoints: usize,
    pub distribution: String,
    pub keypoint_scale: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub baseline_min: f64,
    pub baseline_max: f64,
    pub max_pair_rotation_deg: f64,
    pub pixel_noise_sigma: f64,
    pub noise_multipliers: Vec<f64>,
    pub n_reference_views: usize,
    pub corrupted_reference_fraction: f64,
    pub symmetric_object: bool,

    pub averaging_t_r: f64,
    pub averaging_t_t: f64,
    pub averaging_eta: f64,
    pub averaging_max_iter: usize,
    pub averaging_epsilon: f64,
    pub averaging_max_step: usize,

    pub add_fraction: f64,
    pub proj_pixels: f64,
    pub rot_deg_threshold: f64,
    pub trans_threshold: f64,

    pub lambda1: f64,
    pub lambda2: f64,
    pub epipolar_penalty: String,
    pub refine_step_size: f64,
    pub refine_max_iters: usize,
    pub refine_grad_tol: f64,
    pub refine_fd_step: f64,

    pub out_csv: Option<PathBuf>,
    pub out_json: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let avg = AveragingParams::default();
        let th = MetricThresholds::default();
        let w = LossWeights::default();
        let refine = RefineConfig::default();
        CliConfig {
            mode: "inference".into(),
            n_trials: scene.n_trials,
            base_seed: scene.base_seed,
            n_keypoints: scene.n_keypoints,
            distribution: scene.distribution.name().into(),
            keypoint_scale: scene.keypoint_scale,
            fx: scene.intrinsics.fx,
            fy: scene.intrinsics.fy,
            cx: scene.intrinsics.cx,
            cy: scene.intrinsics.cy,
            depth_min: scene.depth_range.0,
            depth_max: scene.depth_range.1,
            baseline_min: scene.baseline_range.0,
            baseline_max: scene.baseline_range.1,
            max_pair_rotation_deg: scene.max_pair_rotation_deg,
            pixel_noise_sigma: scene.pixel_noise_sigma,
            noise_multipliers: scene.noise_multipliers,
            n_reference_views: scene.n_reference_views,
            corrupted_reference_fraction: scene.corrupted_reference_fraction,
            symmetric_object: scene.symmetric_object,
            averaging_t_r: avg.t_r,
            averaging_t_t: avg.t_t,
            averaging_eta: avg.eta,
            averaging_max_iter: avg.max_iter,
            averaging_epsilon: avg.epsilon,
            averaging_max_step: avg.max_step,
            add_fraction: th.add_fraction,
            proj_pixels: th.proj_pixels,
            rot_deg_threshold: th.rot_deg,
            trans_threshold: th.trans,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            epipolar_penalty: "absolute".into(),
            refine_step_size: refine.step_size,
            refine_max_iters: refine.max_iters,
            refine_grad_tol: refine.grad_tol,
            refine_fd_step: refine.fd_step,
            out_csv: None,
            out_json: None,
        }
    }
}

/// Everything `run_experiment` needs, checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub scene: SceneConfig,
    pub averaging: AveragingParams,
    pub thresholds: MetricThresholds,
    pub weights: LossWeights,
    pub refine: RefineConfig,
    pub mode: Mode,
}

pub fn parse_distribution(name: &str) -> Option<KeypointDistribution> {
    match name {
        "regular" => Some(KeypointDistribution::Regular),
        "r-sphere" => Some(KeypointDistribution::RSphere { radius: 1.0 }),
        "r-volume" => Some(KeypointDistribution::RVolume { half_extent: 1.0 }),
        _ => None,
    }
}

/// Re-labels a library validation error with the config key it came from.
fn keyed<'a>(
    prefix: &'a [(&'static str, &'static str)],
) -> impl Fn(posekit::Error) -> CliError + 'a {
    move |e| match e {
        posekit::Error::InvalidParameter { name, reason } => {
            let key = prefix
                .iter()
                .find(|(from, _)| *from == name)
                .map_or(name, |(_, to)| to);
            CliError::config(key, reason)
        }
        other => CliError::config("config", other.to_string()),
    }
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            let key = if path == "." || path.is_empty() {
                unknown_field(&message).unwrap_or_else(|| "config".into())
            } else {
                path
            };
            CliError::config(key, message)
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn experiment(&self) -> Result<Experiment, CliError> {
        let mode = match self.mode.as_str() {
            "inference" => Mode::Inference,
            "surrogate" => Mode::Surrogate,
            other => {
                return Err(CliError::config(
                    "mode",
                    format!("expected inference or surrogate, got `{other}`"),
                ))
            }
        };
        let distribution = parse_distribution(&self.distribution).ok_or_else(|| {
            CliError::config(
                "distribution",
                format!(
                    "expected regular, r-sphere or r-volume, got `{}`",
                    self.distribution
                ),
            )
        })?;
        let epipolar = match self.epipolar_penalty.as_str() {
            "absolute" => EpipolarPenalty::Absolute,
            "squared" => EpipolarPenalty::Squared,
            other => {
                return Err(CliError::config(
                    "epipolar_penalty",
                    format!("expected absolute or squared, got `{other}`"),
                ))
            }
        };
        let intrinsics = CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
            .map_err(keyed(&[("cx/cy", "cx")]))?;
        let scene = SceneConfig {
            n_keypoints: self.n_keypoints,
            distribution,
            keypoint_scale: self.keypoint_scale,
            intrinsics,
            depth_range: (self.depth_min, self.depth_max),
            baseline_range: (self.baseline_min, self.baseline_max),
            max_pair_rotation_deg: self.max_pair_rotation_deg,
            pixel_noise_sigma: self.pixel_noise_sigma,
            noise_multipliers: self.noise_multipliers.clone(),
            n_reference_views: self.n_reference_views,
            corrupted_reference_fraction: self.corrupted_reference_fraction,
            symmetric_object: self.symmetric_object,
            n_trials: self.n_trials,
            base_seed: self.base_seed,
        };
        scene.validate().map_err(keyed(&[]))?;
        let averaging = AveragingParams {
            t_r: self.averaging_t_r,
            t_t: self.averaging_t_t,
            eta: self.averaging_eta,
            max_iter: self.averaging_max_iter,
            epsilon: self.averaging_epsilon,
            max_step: self.averaging_max_step,
        };
        averaging.validate().map_err(keyed(&[
            ("t_r", "averaging_t_r"),
            ("t_t", "averaging_t_t"),
            ("eta", "averaging_eta"),
            ("max_iter", "averaging_max_iter"),
            ("epsilon", "averaging_epsilon"),
            ("max_step", "averaging_max_step"),
        ]))?;
        let thresholds = MetricThresholds {
            add_fraction: self.add_fraction,
            proj_pixels: self.proj_pixels,
            rot_deg: self.rot_deg_threshold,
            trans: self.trans_threshold,
        };
        thresholds
            .validate()
            .map_err(keyed(&[("rot_deg", "rot_deg_threshold")]))?;
        let weights = LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            epipolar,
        };
        weights.validate().map_err(keyed(&[]))?;
        let refine = RefineConfig {
            step_size: self.refine_step_size,
            max_iters: self.refine_max_iters,
            grad_tol: self.refine_grad_tol,
            fd_step: self.refine_fd_step,
        };
        refine.validate().map_err(keyed(&[
            ("step_size", "refine_step_size"),
            ("grad_tol", "refine_grad_tol"),
            ("fd_step", "refine_fd_step"),
        ]))?;
        Ok(Experiment {
            scene,
            averaging,
            thresholds,
            weights,
            refine,
            mode,
        })
    }

    /// Copy with one sweepable parameter replaced by `value`.
    pub fn with_param(&self, param: &str, value: &str) -> Result<Self, CliError> {
        let mut cfg = self.clone();
        let bad = |e: &dyn std::fmt::Display| {
            CliError::config(param, format!("cannot use value `{value}`: {e}"))
        };
        match param {
            "n_keypoints" => cfg.n_keypoints = value.parse().map_err(|e| bad(&e))?,
            "distribution" => cfg.distribution = value.to_string(),
            "pixel_noise_sigma" => cfg.pixel_noise_sigma = value.parse().map_err(|e| bad(&e))?,
            "n_reference_views" => cfg.n_reference_views = value.parse().map_err(|e| bad(&e))?,
            other => return Err(CliError::UnknownParameter(other.to_string())),
        }
        Ok(cfg)
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Scientific notation with nine significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.8e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e))
}

pub fn trial_row(t: &TrialReport) -> [String; 11] {
    [
        t.trial.to_string(),
        t.seed.to_string(),
        format_float(t.rot_deg()),
        format_float(t.trans()),
        format_float(t.add()),
        format_float(t.adds()),
        format_float(t.proj_px()),
        t.pass_add().to_string(),
        t.pass_proj().to_string(),
        t.pass_degcm().to_string(),
        t.failure.clone().unwrap_or_default(),
    ]
}

pub fn write_trials_csv(path: &Path, report: &ExperimentReport) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for t in &report.trials {
        w.write_record(trial_row(t))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn spread_json(s: &Spread) -> serde_json::Value {
    serde_json::json!({ "median": s.median, "p90": s.p90 })
}

pub fn summary_json(cfg: &CliConfig, s: &ExperimentSummary) -> serde_json::Value {
    let surrogate = s.surrogate.map(|g| {
        serde_json::json!({
            "median_initial_loss": g.median_initial_loss,
            "median_final_loss": g.median_final_loss,
            "loss_reduced_rate": g.loss_reduced_rate,
            "baseline_rot_deg": spread_json(&g.baseline_rot_deg),
            "baseline_trans": spread_json(&g.baseline_trans),
        })
    });
    serde_json::json!({
        "config": cfg,
        "n_trials": s.n_trials,
        "n_failed": s.n_failed,
        "pass_rate_add": s.pass_rate_add,
        "pass_rate_adds": s.pass_rate_adds,
        "pass_rate_proj": s.pass_rate_proj,
        "pass_rate_degcm": s.pass_rate_degcm,
        "rot_deg": spread_json(&s.rot_deg),
        "trans": spread_json(&s.trans),
        "add": spread_json(&s.add),
        "adds": spread_json(&s.adds),
        "proj_px": spread_json(&s.proj_px),
        "surrogate": surrogate,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    let mut file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| CliError::io(path, e))
}

/// Thread count from `POSE_SIM_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::config(
                THREADS_ENV,
                format!("expected a positive integer, got `{v}`"),
            )),
        },
    }
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
    }
}

pub fn run(e: &Experiment) -> ExperimentReport {
    run_experiment(
        &e.scene,
        &e.averaging,
        &e.thresholds,
        &e.weights,
        &e.refine,
        e.mode,
    )
    .expect("experiment inputs are validated")
}

fn output_path(
    flag: Option<&Path>,
    config: &Option<PathBuf>,
    key: &str,
) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.clone())
        .ok_or_else(|| {
            CliError::config(
                key,
                "no output path given on the command line or in the config",
            )
        })
}

pub fn cmd_simulate(
    config_path: &Path,
    out_csv: Option<&Path>,
    out_json: Option<&Path>,
) -> Result<ExperimentSummary, CliError> {
    let cfg = CliConfig::load(config_path)?;
    let experiment = cfg.experiment()?;
    let csv_path = output_path(out_csv, &cfg.out_csv, "out_csv")?;
    let json_path = output_path(out_json, &cfg.out_json, "out_json")?;
    let threads = threads_from_env()?;
    let report = with_threads(threads, || run(&experiment));
    write_trials_csv(&csv_path, &report)?;
    write_json(&json_path, &summary_json(&cfg, &report.summary))?;
    Ok(report.summary)
}

pub fn split_values(values: &str) -> Vec<String> {
    values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn sweep_row(param: &str, value: &str, s: &ExperimentSummary) -> [String; 16] {
    [
        param.to_string(),
        value.to_string(),
        s.n_trials.to_string(),
        s.n_failed.to_string(),
        format_float(s.pass_rate_add),
        format_float(s.pass_rate_adds),
        format_float(s.pass_rate_proj),
        format_float(s.pass_rate_degcm),
        format_float(s.rot_deg.median),
        format_float(s.rot_deg.p90),
        format_float(s.trans.median),
        format_float(s.trans.p90),
        format_float(s.add.median),
        format_float(s.add.p90),
        format_float(s.proj_px.median),
        format_float(s.proj_px.p90),
    ]
}

/// One experiment per value; all values are validated before any runs.
pub fn cmd_sweep(
    config_path: &Path,
    param: &str,
    values: &str,
    out_csv: Option<&Path>,
) -> Result<Vec<(String, ExperimentSummary)>, CliError> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(CliError::UnknownParameter(param.to_string()));
    }
    let cfg = CliConfig::load(config_path)?;
    let values = split_values(values);
    if values.is_empty() {
        return Err(CliError::config(
            "values",
            "the sweep needs at least one value",
        ));
    }
    let experiments = values
        .iter()
        .map(|v| cfg.with_param(param, v)?.experiment())
        .collect::<Result<Vec<_>, _>>()?;
    let csv_path = output_path(out_csv, &cfg.out_csv, "out_csv")?;
    let threads = threads_from_env()?;

    let rows: Vec<(String, ExperimentSummary)> = with_threads(threads, || {
        values
            .iter()
            .zip(&experiments)
            .map(|(v, e)| (v.clone(), run(e).summary))
            .collect()
    });
    let mut w = csv_writer(&csv_path)?;
    w.write_record(SWEEP_HEADER)
        .map_err(|e| csv_error(&csv_path, e))?;
    for (v, s) in &rows {
        w.write_record(sweep_row(param, v, s))
            .map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    Ok(rows)
}
