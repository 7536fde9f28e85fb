//! Synthetic FMCW lidar: piecewise-constant-twist trajectories, planar
//! scenes, and scanning-while-moving ray casting with a Doppler channel.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{DatasetWriter, PoseRecord};
use crate::error::{ExportError, SimError};
use crate::factors::Extrinsic;
use crate::frontend::{LidarFrame, LidarPoint};
use crate::gp::TrajectoryKnot;
use crate::liealg::{exp_se3, skew, Pose, Twist};

/// Finite rectangle `center + a u + b v`, `|a| <= half_u`, `|b| <= half_v`,
/// `v = normal x u`, translating with a constant world velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenePlane {
    center: Vector3<f64>,
    normal: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    half_u: f64,
    half_v: f64,
    velocity: Vector3<f64>,
}

impl ScenePlane {
    /// `u_hint` is projected onto the plane to fix the in-plane axes.
    pub fn new(
        center: Vector3<f64>,
        normal: Vector3<f64>,
        u_hint: Vector3<f64>,
        half_u: f64,
        half_v: f64,
    ) -> Result<Self, SimError> {
        let n = normal
            .try_normalize(1e-12)
            .ok_or_else(|| SimError::InvalidScene("zero plane normal".into()))?;
        let u = (u_hint - n * n.dot(&u_hint))
            .try_normalize(1e-9)
            .ok_or_else(|| SimError::InvalidScene("in-plane axis parallel to normal".into()))?;
        if !(half_u > 0.0 && half_v > 0.0) {
            return Err(SimError::InvalidScene("plane extents must be positive".into()));
        }
        Ok(Self {
            center,
            normal: n,
            u,
            v: n.cross(&u),
            half_u,
            half_v,
            velocity: Vector3::zeros(),
        })
    }

    pub fn with_velocity(mut self, velocity: Vector3<f64>) -> Self {
        self.velocity = velocity;
        self
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.normal
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.velocity
    }

    pub fn is_static(&self) -> bool {
        self.velocity == Vector3::zeros()
    }

    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        self.center + self.velocity * t
    }

    /// Distance along the unit ray `origin + s dir` to the plane at time `t`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let c = self.center_at(t);
        let s = self.normal.dot(&(c - origin)) / denom;
        if !(s > 0.0) {
            return None;
        }
        let rel = origin + dir * s - c;
        (rel.dot(&self.u).abs() <= self.half_u && rel.dot(&self.v).abs() <= self.half_v).then_some(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub planes: Vec<ScenePlane>,
}

impl Scene {
    pub fn push(&mut self, plane: ScenePlane) {
        self.planes.push(plane);
    }

    /// Nearest hit `(distance, plane index)` within `max_range`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64, max_range: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.planes.iter().enumerate() {
            if let Some(s) = p.intersect(origin, dir, t) {
                if s <= max_range && best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, i));
                }
            }
        }
        best
    }

    /// Five faces (sides and top) of an axis-aligned box resting on `floor_z`.
    pub fn add_box(&mut self, center_xy: [f64; 2], half: [f64; 3], floor_z: f64) -> Result<(), SimError> {
        let [cx, cy] = center_xy;
        let [hx, hy, hz] = half;
        let cz = floor_z + hz;
        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        self.push(ScenePlane::new(Vector3::new(cx + hx, cy, cz), x, y, hy, hz)?);
        self.push(ScenePlane::new(Vector3::new(cx - hx, cy, cz), -x, y, hy, hz)?);
        self.push(ScenePlane::new(Vector3::new(cx, cy + hy, cz), y, x, hx, hz)?);
        self.push(ScenePlane::new(Vector3::new(cx, cy - hy, cz), -y, x, hx, hz)?);
        self.push(ScenePlane::new(Vector3::new(cx, cy, cz + hz), z, x, hx, hy)?);
        Ok(())
    }
}

/// Height of the sensor above the floor in the stock scenes.
pub const SENSOR_HEIGHT: f64 = 2.0;

/// Straight tunnel along world `x` from `-20` to `length`: two side walls,
/// floor and ceiling, nothing that constrains motion along the axis.
pub fn make_tunnel_scene(length: f64, width: f64, height: f64) -> Result<Scene, SimError> {
    if !(length > 0.0 && width > 0.0 && height > SENSOR_HEIGHT) {
        return Err(SimError::InvalidScene(format!(
            "tunnel needs positive length/width and height above {SENSOR_HEIGHT} m"
        )));
    }
    let x0 = -20.0;
    let cx = 0.5 * (x0 + length);
    let half_len = 0.5 * (length - x0);
    let floor = -SENSOR_HEIGHT;
    let mid_z = floor + 0.5 * height;
    let mut s = Scene::default();
    let x = Vector3::x();
    s.push(ScenePlane::new(Vector3::new(cx, 0.5 * width, mid_z), -Vector3::y(), x, half_len, 0.5 * height)?);
    s.push(ScenePlane::new(Vector3::new(cx, -0.5 * width, mid_z), Vector3::y(), x, half_len, 0.5 * height)?);
    s.push(ScenePlane::new(Vector3::new(cx, 0.0, floor), Vector3::z(), x, half_len, 0.5 * width)?);
    s.push(ScenePlane::new(Vector3::new(cx, 0.0, floor + height), -Vector3::z(), x, half_len, 0.5 * width)?);
    Ok(s)
}

/// Closes both ends of a tunnel built by [`make_tunnel_scene`].
pub fn add_end_caps(scene: &mut Scene, length: f64, width: f64, height: f64) -> Result<(), SimError> {
    let mid_z = -SENSOR_HEIGHT + 0.5 * height;
    let y = Vector3::y();
    scene.push(ScenePlane::new(Vector3::new(-20.0, 0.0, mid_z), Vector3::x(), y, 0.5 * width, 0.5 * height)?);
    scene.push(ScenePlane::new(Vector3::new(length, 0.0, mid_z), -Vector3::x(), y, 0.5 * width, 0.5 * height)?);
    Ok(())
}

/// Open corridor along `x`: floor and low side barriers close to the path,
/// with buildings set back `setback` meters on both sides. Only the
/// buildings constrain motion along the corridor.
pub fn make_corridor_scene(length: f64, setback: f64, seed: u64) -> Result<Scene, SimError> {
    if !(length > 0.0 && setback > 10.0) {
        return Err(SimError::InvalidScene("corridor needs length > 0 and setback > 10 m".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = -50.0;
    let x1 = length + 50.0;
    let cx = 0.5 * (x0 + x1);
    let half_len = 0.5 * (x1 - x0);
    let floor = -SENSOR_HEIGHT;
    let x = Vector3::x();
    let mut s = Scene::default();
    s.push(ScenePlane::new(Vector3::new(cx, 0.0, floor), Vector3::z(), x, half_len, setback + 60.0)?);
    for side in [-1.0, 1.0] {
        s.push(ScenePlane::new(Vector3::new(cx, side * 6.0, floor + 0.6), -side * Vector3::y(), x, half_len, 0.6)?);
    }
    for side in [-1.0, 1.0] {
        let mut bx = x0 + rng.random_range(0.0..20.0);
        while bx < x1 {
            let hx = rng.random_range(4.0..12.0);
            let hy = rng.random_range(4.0..10.0);
            let hz = rng.random_range(10.0..30.0);
            let by = side * (setback + hy + rng.random_range(0.0..10.0));
            s.add_box([bx + hx, by], [hx, hy, hz], floor)?;
            bx += 2.0 * hx + rng.random_range(8.0..25.0);
        }
    }
    Ok(s)
}

/// Walled yard with pillars and boxes scattered on both sides of the path
/// along `x`; geometrically rich in every direction.
pub fn make_box_scene(length: f64, width: f64, seed: u64) -> Result<Scene, SimError> {
    if !(length > 0.0 && width > 16.0) {
        return Err(SimError::InvalidScene("box world needs length > 0 and width > 16 m".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = -40.0;
    let x1 = length + 40.0;
    let floor = -SENSOR_HEIGHT;
    let wall_h = 8.0;
    let mut s = Scene::default();
    let (x, y) = (Vector3::x(), Vector3::y());
    let cx = 0.5 * (x0 + x1);
    let half_len = 0.5 * (x1 - x0);
    let hw = 0.5 * width;
    s.push(ScenePlane::new(Vector3::new(cx, 0.0, floor), Vector3::z(), x, half_len, hw)?);
    s.push(ScenePlane::new(Vector3::new(cx, hw, floor + 0.5 * wall_h), -y, x, half_len, 0.5 * wall_h)?);
    s.push(ScenePlane::new(Vector3::new(cx, -hw, floor + 0.5 * wall_h), y, x, half_len, 0.5 * wall_h)?);
    s.push(ScenePlane::new(Vector3::new(x0, 0.0, floor + 0.5 * wall_h), x, y, hw, 0.5 * wall_h)?);
    s.push(ScenePlane::new(Vector3::new(x1, 0.0, floor + 0.5 * wall_h), -x, y, hw, 0.5 * wall_h)?);
    let mut bx = x0 + 5.0;
    while bx < x1 - 5.0 {
        for side in [-1.0, 1.0] {
            let h = [rng.random_range(0.5..2.5), rng.random_range(0.5..2.5), rng.random_range(1.0..4.0)];
            let lateral = rng.random_range(5.0..(hw - 3.0).max(5.5));
            s.add_box([bx + rng.random_range(-2.0..2.0), side * lateral], h, floor)?;
        }
        bx += rng.random_range(6.0..12.0);
    }
    Ok(s)
}

/// Adds `count` vehicle-sized planes facing back down the path, starting
/// ahead of the sensor and moving along `x` at `speed` in the world.
pub fn add_moving_objects(scene: &mut Scene, count: usize, speed: f64, seed: u64) -> Result<(), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..count {
        let ahead = 15.0 + 10.0 * k as f64;
        let lateral = rng.random_range(-1.5..1.5);
        let plane = ScenePlane::new(
            Vector3::new(ahead, lateral, -SENSOR_HEIGHT + 1.5),
            -Vector3::x(),
            Vector3::y(),
            1.2,
            1.5,
        )?
        .with_velocity(Vector3::new(speed, 0.0, 0.0));
        scene.push(plane);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub horizontal_fov_deg: f64,
    pub vertical_fov_deg: f64,
    pub max_range: f64,
    /// Standard deviation of the Doppler channel (m/s).
    pub doppler_noise: f64,
    /// Standard deviation along the ray (m).
    pub range_noise: f64,
    pub frame_rate: f64,
    pub beams: usize,
    /// Azimuth steps per frame; all beams of a step share its timestamp.
    pub azimuth_steps: usize,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            horizontal_fov_deg: 120.0,
            vertical_fov_deg: 30.0,
            max_range: 300.0,
            doppler_noise: 0.03,
            range_noise: 0.02,
            frame_rate: 10.0,
            beams: 32,
            azimuth_steps: 256,
        }
    }
}

impl SensorModel {
    pub fn noiseless(mut self) -> Self {
        self.doppler_noise = 0.0;
        self.range_noise = 0.0;
        self
    }

    pub fn period(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.horizontal_fov_deg > 0.0
            && self.horizontal_fov_deg <= 360.0
            && self.vertical_fov_deg > 0.0
            && self.vertical_fov_deg <= 180.0
            && self.max_range > 0.0
            && self.doppler_noise >= 0.0
            && self.range_noise >= 0.0
            && self.frame_rate > 0.0
            && self.beams > 0
            && self.azimuth_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidScene(format!("invalid sensor model {self:?}")))
        }
    }

    /// Relative timestamp of an azimuth step; strictly increasing in `step`.
    pub fn step_time(&self, step: usize) -> f64 {
        self.period() * step as f64 / self.azimuth_steps as f64
    }

    /// Unit ray in the sensor frame (x forward, y left, z up).
    pub fn ray(&self, beam: usize, step: usize) -> Vector3<f64> {
        let hfov = self.horizontal_fov_deg.to_radians();
        let vfov = self.vertical_fov_deg.to_radians();
        let az = -0.5 * hfov + hfov * (step as f64 + 0.5) / self.azimuth_steps as f64;
        let el = if self.beams == 1 {
            0.0
        } else {
            -0.5 * vfov + vfov * beam as f64 / (self.beams - 1) as f64
        };
        Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

/// One constant-twist piece of a ground-truth trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwistSegment {
    pub duration: f64,
    pub twist: Twist,
}

/// World-to-vehicle pose driven by piecewise-constant body twists from
/// `initial` at time 0: `T(t) = exp((t - t_k) w_k^) T(t_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTrajectory {
    segments: Vec<TwistSegment>,
    /// Start time and pose of each segment.
    starts: Vec<(f64, Pose)>,
    end_time: f64,
}

impl GtTrajectory {
    pub fn new(initial: Pose, segments: Vec<TwistSegment>) -> Result<Self, SimError> {
        if segments.is_empty() || segments.iter().any(|s| !(s.duration > 0.0)) {
            return Err(SimError::InvalidScene("trajectory segments need positive durations".into()));
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut t = 0.0;
        let mut pose = initial;
        for s in &segments {
            starts.push((t, pose));
            pose = exp_se3(&(s.twist.to_vector() * s.duration)).compose(&pose);
            t += s.duration;
        }
        Ok(Self {
            segments,
            starts,
            end_time: t,
        })
    }

    /// Accelerates from rest to `speed` (m/s, forward) over `accel_time`,
    /// then holds it until `duration`, in steps of `step` seconds. A nonzero
    /// `yaw_rate` alternates sign every `yaw_period` seconds after the ramp.
    pub fn drive(speed: f64, accel_time: f64, duration: f64, step: f64, yaw_rate: f64, yaw_period: f64) -> Result<Self, SimError> {
        if !(step > 0.0 && duration > 0.0 && accel_time >= 0.0) {
            return Err(SimError::InvalidScene("drive profile needs positive step and duration".into()));
        }
        let n = (duration / step).round().max(1.0) as usize;
        let segments = (0..n)
            .map(|k| {
                let t_mid = (k as f64 + 0.5) * step;
                let v = if t_mid < accel_time { speed * t_mid / accel_time } else { speed };
                let wz = if yaw_rate != 0.0 && t_mid >= accel_time && yaw_period > 0.0 {
                    let phase = ((t_mid - accel_time) / yaw_period).floor() as i64;
                    if phase % 2 == 0 { yaw_rate } else { -yaw_rate }
                } else {
                    0.0
                };
                // Forward motion of the vehicle is a negative body translation rate.
                TwistSegment {
                    duration: step,
                    twist: Twist::new(Vector3::new(-v, 0.0, 0.0), Vector3::new(0.0, 0.0, -wz)),
                }
            })
            .collect();
        Self::new(Pose::identity(), segments)
    }

    pub fn end_time(&self) -> f64 {
        self.end_time
    }

    fn segment_at(&self, t: f64) -> Result<usize, SimError> {
        if !(t >= 0.0 && t <= self.end_time) {
            return Err(SimError::NoTrajectoryCoverage {
                start: t,
                end: t,
            });
        }
        Ok(self.starts.partition_point(|(s, _)| *s <= t).saturating_sub(1))
    }

    pub fn pose(&self, t: f64) -> Result<Pose, SimError> {
        let k = self.segment_at(t)?;
        let (t0, p0) = &self.starts[k];
        Ok(exp_se3(&(self.segments[k].twist.to_vector() * (t - t0))).compose(p0))
    }

    pub fn twist(&self, t: f64) -> Result<Twist, SimError> {
        Ok(self.segments[self.segment_at(t)?].twist)
    }

    pub fn knot(&self, t: f64) -> Result<TrajectoryKnot, SimError> {
        Ok(TrajectoryKnot::new(t, self.pose(t)?, self.twist(t)?))
    }

    fn covers(&self, start: f64, end: f64) -> Result<(), SimError> {
        if start >= 0.0 && end <= self.end_time + 1e-9 {
            Ok(())
        } else {
            Err(SimError::NoTrajectoryCoverage { start, end })
        }
    }

    /// World-from-vehicle poses at frame boundaries `k / frame_rate`,
    /// `k = 0..=frames`.
    pub fn groundtruth(&self, frames: usize, frame_rate: f64) -> Result<Vec<PoseRecord>, SimError> {
        (0..=frames)
            .map(|k| {
                let t = (k as f64 / frame_rate).min(self.end_time);
                Ok(PoseRecord {
                    timestamp: k as f64 / frame_rate,
                    pose: self.pose(t)?.inverse(),
                })
            })
            .collect()
    }

    /// Ground-truth path length over `[0, t]`, integrated exactly per segment.
    pub fn path_length(&self, t: f64) -> f64 {
        let mut len = 0.0;
        for ((t0, _), seg) in self.starts.iter().zip(&self.segments) {
            if *t0 >= t {
                break;
            }
            let dt = (t - t0).min(seg.duration);
            // Speed of the vehicle origin is |nu| for a body twist.
            len += seg.twist.nu.norm() * dt;
        }
        len
    }
}

/// A simulated frame with the index of the plane each point came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedFrame {
    pub frame: LidarFrame,
    pub planes: Vec<usize>,
}

/// Seed of the noise stream for one frame.
fn frame_rng(seed: u64, frame_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index as u64 + 1);
    rng
}

/// Casts every ray of frame `frame_index`, with the sensor pose and twist at
/// each ray's own timestamp. Doppler is the range rate `d . (v_point -
/// v_sensor)` in the world.
pub fn simulate_frame_with_hits(
    traj: &GtTrajectory,
    scene: &Scene,
    sensor: &SensorModel,
    ext: &Extrinsic,
    frame_index: usize,
    seed: u64,
) -> Result<SimulatedFrame, SimError> {
    sensor.validate()?;
    let start = frame_index as f64 * sensor.period();
    let end = (frame_index + 1) as f64 * sensor.period();
    traj.covers(start, end)?;
    let mut rng = frame_rng(seed, frame_index);
    let range_noise = Normal::new(0.0, sensor.range_noise).expect("non-negative std");
    let doppler_noise = Normal::new(0.0, sensor.doppler_noise).expect("non-negative std");
    let lidar_origin_v = ext.t_vl().translation;
    let mut points = Vec::new();
    let mut planes = Vec::new();
    for step in 0..sensor.azimuth_steps {
        let t = start + sensor.step_time(step);
        let t_vi = traj.pose(t)?;
        let twist = traj.twist(t)?;
        let t_il = t_vi.inverse().compose(ext.t_vl());
        let origin = t_il.translation;
        // d/dt of the lidar origin in the world, from dT_iv/dt = -T_iv w^.
        let v_sensor = -(t_vi.rotation.transpose() * (twist.nu + skew(&twist.omega) * lidar_origin_v));
        for beam in 0..sensor.beams {
            let d_l = sensor.ray(beam, step);
            let d_w = t_il.rotation * d_l;
            let Some((range, idx)) = scene.cast(&origin, &d_w, t, sensor.max_range) else {
                continue;
            };
            let range_rate = d_w.dot(&(scene.planes[idx].velocity() - v_sensor));
            let r = range + range_noise.sample(&mut rng);
            let dv = range_rate + doppler_noise.sample(&mut rng);
            points.push(LidarPoint::new(d_l * r, t, Some(dv)));
            planes.push(idx);
        }
    }
    Ok(SimulatedFrame {
        frame: LidarFrame::new(frame_index, start, end, points),
        planes,
    })
}

pub fn simulate_frame(
    traj: &GtTrajectory,
    scene: &Scene,
    sensor: &SensorModel,
    ext: &Extrinsic,
    frame_index: usize,
    seed: u64,
) -> Result<LidarFrame, SimError> {
    Ok(simulate_frame_with_hits(traj, scene, sensor, ext, frame_index, seed)?.frame)
}

/// Frames `0..n_frames`, generated in parallel.
pub fn simulate_sequence(
    traj: &GtTrajectory,
    scene: &Scene,
    sensor: &SensorModel,
    ext: &Extrinsic,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<LidarFrame>, SimError> {
    (0..n_frames)
        .into_par_iter()
        .map(|k| simulate_frame(traj, scene, sensor, ext, k, seed))
        .collect()
}

/// Writes frames, manifest and ground truth in the dataset layout.
pub fn export_dataset(
    traj: &GtTrajectory,
    scene: &Scene,
    sensor: &SensorModel,
    ext: &Extrinsic,
    n_frames: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<(), ExportError> {
    let gt = traj.groundtruth(n_frames, sensor.frame_rate)?;
    let mut writer = DatasetWriter::create(out_dir)?;
    // Bounded batches keep memory flat for long sequences.
    const BATCH: usize = 32;
    let mut k = 0;
    while k < n_frames {
        let hi = (k + BATCH).min(n_frames);
        let frames: Vec<LidarFrame> = (k..hi)
            .into_par_iter()
            .map(|i| simulate_frame(traj, scene, sensor, ext, i, seed))
            .collect::<Result<_, _>>()?;
        for f in &frames {
            writer.push(f)?;
        }
        k = hi;
    }
    writer.finish(Some(&gt))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Tunnel,
    Corridor,
    Box,
}

impl std::str::FromStr for SceneKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "tunnel" => Ok(SceneKind::Tunnel),
            "corridor" => Ok(SceneKind::Corridor),
            "box" => Ok(SceneKind::Box),
            other => Err(SimError::InvalidScene(format!("unknown scene '{other}'"))),
        }
    }
}

pub const TUNNEL_WIDTH: f64 = 10.0;
pub const TUNNEL_HEIGHT: f64 = 6.0;
/// Corridor buildings start this far from the path.
pub const CORRIDOR_SETBACK: f64 = 45.0;
pub const BOX_WIDTH: f64 = 40.0;

/// A straight drive through one of the stock scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scene: SceneKind,
    /// Cruise speed (m/s).
    pub speed: f64,
    pub frames: usize,
    pub seed: u64,
    pub moving_objects: usize,
    /// Speed of moving objects relative to the cruising sensor, away from it.
    pub moving_relative_speed: f64,
    /// Ramp from rest to `speed` (s).
    pub accel_time: f64,
}

impl Scenario {
    pub fn new(scene: SceneKind, speed: f64, frames: usize, seed: u64) -> Self {
        Self {
            scene,
            speed,
            frames,
            seed,
            moving_objects: 0,
            moving_relative_speed: 15.0,
            accel_time: 2.0,
        }
    }

    /// Frames needed to cover `distance` meters, ramp included.
    pub fn frames_for_distance(speed: f64, distance: f64, accel_time: f64, frame_rate: f64) -> usize {
        let ramp = 0.5 * speed * accel_time;
        let t = if distance <= ramp {
            (2.0 * distance * accel_time / speed).sqrt()
        } else {
            accel_time + (distance - ramp) / speed
        };
        (t * frame_rate).ceil() as usize
    }

    pub fn trajectory(&self, sensor: &SensorModel) -> Result<GtTrajectory, SimError> {
        if !(self.speed >= 0.0 && self.frames > 0) {
            return Err(SimError::InvalidScene("scenario needs speed >= 0 and at least one frame".into()));
        }
        let step = sensor.period();
        GtTrajectory::drive(self.speed, self.accel_time, (self.frames + 1) as f64 * step, step, 0.0, 0.0)
    }

    pub fn scene(&self, sensor: &SensorModel) -> Result<Scene, SimError> {
        let travel = self.trajectory(sensor)?.path_length(self.frames as f64 * sensor.period());
        let length = travel + 100.0;
        let mut scene = match self.scene {
            SceneKind::Tunnel => make_tunnel_scene(length, TUNNEL_WIDTH, TUNNEL_HEIGHT)?,
            SceneKind::Corridor => make_corridor_scene(length, CORRIDOR_SETBACK, self.seed)?,
            SceneKind::Box => make_box_scene(length, BOX_WIDTH, self.seed)?,
        };
        if self.moving_objects > 0 {
            add_moving_objects(&mut scene, self.moving_objects, self.speed + self.moving_relative_speed, self.seed)?;
        }
        Ok(scene)
    }

    pub fn simulate(&self, sensor: &SensorModel, ext: &Extrinsic) -> Result<(Vec<LidarFrame>, Vec<PoseRecord>), SimError> {
        let traj = self.trajectory(sensor)?;
        let scene = self.scene(sensor)?;
        let frames = simulate_sequence(&traj, &scene, sensor, ext, self.frames, self.seed)?;
        Ok((frames, traj.groundtruth(self.frames, sensor.frame_rate)?))
    }

    pub fn export(&self, sensor: &SensorModel, ext: &Extrinsic, out_dir: &Path) -> Result<(), ExportError> {
        let traj = self.trajectory(sensor)?;
        let scene = self.scene(sensor)?;
        export_dataset(&traj, &scene, sensor, ext, self.frames, out_dir, self.seed)
    }
}
