//! Frame streaming, front end to solver hand-off, and trajectory publication.

use std::path::Path;
use std::time::{Duration, Instant};

use log::{info, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::bench::{report, StageTimings, TimingReport, STAGE_ASSOCIATION, STAGE_IO, STAGE_MAP_UPDATE};
use crate::dataset_io::{FrameSource, PoseRecord};
use crate::error::{ConfigError, PipelineError};
use crate::factors::{Extrinsic, FactorWeights, RobustConfig};
use crate::frontend::{extract_keypoints, AssociationConfig, LidarFrame, LidarPoint, LocalMap, LocalMapConfig};
use crate::gp::{TrajectoryKnot, WnoaPriorParams};
use crate::liealg::{exp_so3, Pose, Twist};
use crate::solver::{align_frame, AlignContext, FrameAlignment, FactorSettings, MarginalPrior, Mode, SlidingWindow, SolverConfig};

/// Lidar mounting, `T_lv` as a translation and a rotation vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrinsicConfig {
    pub translation: [f64; 3],
    pub rotation_vector: [f64; 3],
}

impl Default for ExtrinsicConfig {
    fn default() -> Self {
        Self {
            translation: [0.0; 3],
            rotation_vector: [0.0; 3],
        }
    }
}

impl ExtrinsicConfig {
    pub fn to_extrinsic(&self) -> Extrinsic {
        let r = exp_so3(&Vector3::from(self.rotation_vector));
        Extrinsic::new(Pose::new(r, Vector3::from(self.translation)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// Voxel size for keypoint selection (m).
    pub keypoint_grid: f64,
    /// Voxel size for downsampling points before map insertion (m).
    pub map_insert_grid: f64,
    /// Keypoint draws use `keypoint_seed + frame index`.
    pub keypoint_seed: u64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            keypoint_grid: 1.0,
            map_insert_grid: 0.5,
            keypoint_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    /// Standard deviation holding the first pose at identity.
    pub initial_pose_sigma: f64,
    /// Standard deviation of the zero initial twist (m/s and rad/s).
    pub initial_twist_sigma: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            initial_pose_sigma: 1e-4,
            initial_twist_sigma: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Points farther than this from the sensor are dropped (m).
    pub range_limit: Option<f64>,
    /// Multiplies every Doppler reading, for sensors reporting the opposite sign.
    pub doppler_sign: f64,
    /// Publish each knot as soon as it is the newest in the window instead
    /// of when it leaves the window.
    pub publish_front: bool,
    pub extrinsic: ExtrinsicConfig,
    pub bootstrap: BootstrapConfig,
    pub frontend: FrontendConfig,
    pub map: LocalMapConfig,
    pub association: AssociationConfig,
    pub prior: WnoaPriorParams,
    pub weights: FactorWeights,
    pub robust: RobustConfig,
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Doppler,
            range_limit: None,
            doppler_sign: 1.0,
            publish_front: false,
            extrinsic: ExtrinsicConfig::default(),
            bootstrap: BootstrapConfig::default(),
            frontend: FrontendConfig::default(),
            map: LocalMapConfig::default(),
            association: AssociationConfig::default(),
            prior: WnoaPriorParams::default(),
            weights: FactorWeights::default(),
            robust: RobustConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Some(r) = self.range_limit {
            if !(r > 0.0) {
                return bad(format!("range_limit must be positive, got {r}"));
            }
        }
        if self.doppler_sign != 1.0 && self.doppler_sign != -1.0 {
            return bad(format!("doppler_sign must be 1 or -1, got {}", self.doppler_sign));
        }
        if !(self.frontend.keypoint_grid > 0.0 && self.frontend.map_insert_grid > 0.0) {
            return bad("frontend grids must be positive".into());
        }
        if !(self.map.voxel_size > 0.0 && self.map.max_points_per_voxel > 0 && self.map.crop_radius > 0.0) {
            return bad("map sizes must be positive".into());
        }
        if !(self.bootstrap.initial_pose_sigma > 0.0 && self.bootstrap.initial_twist_sigma > 0.0) {
            return bad("bootstrap sigmas must be positive".into());
        }
        if !self.prior.is_valid() {
            return bad("prior qc_diag must be positive".into());
        }
        if !(self.weights.beta >= 0.0 && self.weights.p2p_sigma > 0.0 && self.weights.dv_sigma > 0.0) {
            return bad("factor weights must be positive".into());
        }
        self.solver.validate().map_err(ConfigError::Invalid)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn factor_settings(&self) -> FactorSettings {
        FactorSettings {
            prior: self.prior,
            ext: self.extrinsic.to_extrinsic(),
            weights: self.weights,
            robust: self.robust,
        }
    }
}

/// One published state: the knot ending `frame`, or the initial knot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameEstimate {
    /// `None` for the initial state at the start of the first frame.
    pub frame: Option<usize>,
    pub time: f64,
    /// World-to-vehicle.
    pub pose: Pose,
    pub twist: Twist,
}

#[derive(Clone, Debug, Default)]
pub struct OdometryResult {
    pub estimates: Vec<FrameEstimate>,
    pub timings: StageTimings,
    pub frames_processed: usize,
    pub frames_skipped: usize,
    pub frames_diverged: usize,
    pub wall_time: Duration,
}

impl OdometryResult {
    /// World-from-vehicle records in the trajectory file layout.
    pub fn pose_records(&self) -> Vec<PoseRecord> {
        self.estimates
            .iter()
            .map(|e| PoseRecord {
                timestamp: e.time,
                pose: e.pose.inverse(),
            })
            .collect()
    }

    pub fn timing_report(&self, include_io: bool) -> TimingReport {
        report(&self.timings, self.frames_processed, self.wall_time, include_io)
    }
}

/// Intermediate products of one frame, for inspection.
#[derive(Clone, Debug)]
pub struct FrameTrace<'a> {
    /// The frame after range limiting and mode filtering.
    pub frame: &'a LidarFrame,
    pub keypoints: &'a LidarFrame,
    pub map: &'a LocalMap,
    pub skipped: bool,
    /// Solver statistics; `None` when the solver failed.
    pub alignment: Option<&'a FrameAlignment>,
}

fn knot_estimate(frame: Option<usize>, k: &TrajectoryKnot) -> FrameEstimate {
    FrameEstimate {
        frame,
        time: k.time,
        pose: k.pose,
        twist: k.twist,
    }
}

fn prepare(frame: LidarFrame, config: &PipelineConfig) -> LidarFrame {
    let mut frame = match config.range_limit {
        Some(r) => frame.range_limited(r),
        None => frame,
    };
    match config.mode {
        Mode::IcpOnly => frame.without_doppler(),
        Mode::Doppler => {
            if config.doppler_sign != 1.0 {
                for p in &mut frame.points {
                    p.doppler = p.doppler.map(|d| d * config.doppler_sign);
                }
            }
            frame
        }
    }
}

pub fn run(config: &PipelineConfig, reader: impl FrameSource) -> Result<OdometryResult, PipelineError> {
    run_with_trace(config, reader, |_| {})
}

/// Runs the odometry over every frame of `reader`, calling `trace` after
/// each frame has been handled.
pub fn run_with_trace(
    config: &PipelineConfig,
    mut reader: impl FrameSource,
    mut trace: impl FnMut(&FrameTrace),
) -> Result<OdometryResult, PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let settings = config.factor_settings();
    let ctx = AlignContext {
        settings,
        solver: config.solver,
        association: config.association,
        mode: config.mode,
    };
    let mut timings = StageTimings::new();
    let mut result = OdometryResult::default();
    let mut map = LocalMap::new(config.map);
    let mut window: Option<SlidingWindow> = None;

    loop {
        let next = timings.time(STAGE_IO, || reader.next());
        let Some(frame) = next else { break };
        let frame = prepare(frame?, config);

        let window = window.get_or_insert_with(|| {
            let x0 = TrajectoryKnot::new(frame.start_time, Pose::identity(), Twist::zero());
            result.estimates.push(knot_estimate(None, &x0));
            let prior = MarginalPrior::bootstrap(
                x0,
                config.bootstrap.initial_pose_sigma,
                config.bootstrap.initial_twist_sigma,
            );
            SlidingWindow::new(x0, prior)
        });
        if !(frame.end_time > window.newest().time) {
            warn!("frame {} ends at or before the previous one; skipped", frame.index);
            result.frames_skipped += 1;
            continue;
        }

        let first = result.frames_processed + result.frames_skipped == 0;
        let seed = config.frontend.keypoint_seed.wrapping_add(frame.index as u64);
        let selected = timings.time(STAGE_ASSOCIATION, || {
            extract_keypoints(&frame, config.frontend.keypoint_grid, seed).and_then(|kp| {
                extract_keypoints(&frame, config.frontend.map_insert_grid, seed).map(|m| (kp, m))
            })
        });
        let (keypoints, map_points, skipped) = match selected {
            Ok((kp, m)) => (kp, m.points, false),
            Err(e) => {
                warn!("frame {}: {e}; extrapolating", frame.index);
                (LidarFrame::new(frame.index, frame.start_time, frame.end_time, Vec::new()), Vec::new(), true)
            }
        };

        // The first frame seeds the map at the initial pose as recorded.
        let insert: &[LidarPoint] = if first { &[] } else { &map_points };
        let outcome = align_frame(window, &keypoints, insert, &mut map, &ctx, &mut timings);
        if first {
            timings.time(STAGE_MAP_UPDATE, || {
                let pts: Vec<Vector3<f64>> = map_points
                    .iter()
                    .map(|p| settings.ext.sensor_to_world(&Pose::identity(), &p.position.xyz))
                    .collect();
                map.insert_frame(&pts);
            });
        }
        match &outcome {
            Ok(out) => {
                if out.diverged {
                    result.frames_diverged += 1;
                }
                if !config.publish_front {
                    // The initial knot is already published exactly.
                    result
                        .estimates
                        .extend(out.published.iter().filter(|(f, _)| f.is_some()).map(|(f, k)| knot_estimate(*f, k)));
                }
            }
            Err(e) => {
                warn!("frame {}: solver failed ({e}); keeping extrapolated state", frame.index);
                result.frames_diverged += 1;
            }
        }
        if config.publish_front {
            result.estimates.push(knot_estimate(Some(frame.index), window.newest()));
        }
        if skipped {
            result.frames_skipped += 1;
        } else {
            result.frames_processed += 1;
        }
        trace(&FrameTrace {
            frame: &frame,
            keypoints: &keypoints,
            map: &map,
            skipped,
            alignment: outcome.as_ref().ok(),
        });
    }

    let Some(window) = window else {
        return Err(PipelineError::NoFrames);
    };
    if !config.publish_front {
        result.estimates.extend(
            window
                .knot_frames()
                .iter()
                .filter(|(f, _)| f.is_some())
                .map(|(f, k)| knot_estimate(*f, k)),
        );
    }
    result.timings = timings;
    result.wall_time = started.elapsed();
    info!(
        "{} frames processed, {} skipped, {} diverged in {:.2} s",
        result.frames_processed,
        result.frames_skipped,
        result.frames_diverged,
        result.wall_time.as_secs_f64()
    );
    Ok(result)
}
