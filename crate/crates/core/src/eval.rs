//! Relative odometry metrics: KITTI segment errors and frame-to-frame errors.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset_io::PoseRecord;
use crate::error::EvalError;
use crate::liealg::{rotation_angle, Pose};

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegmentError {
    pub start_frame: usize,
    pub length: f64,
    /// Percent of segment length.
    pub translation_error: f64,
    pub rotation_error_deg_per_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrameError {
    pub frame: usize,
    pub translation_m: f64,
    pub rotation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub kitti_rte_percent: f64,
    pub kitti_rre_deg_per_m: f64,
    pub f2f_rte_m: f64,
    pub f2f_rre_deg: f64,
    pub segments: Vec<SegmentError>,
    pub frame_errors: Vec<FrameError>,
    pub excluded_frames: usize,
    pub evaluated_frames: usize,
}

/// Estimated and ground-truth poses paired by timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedTrajectory {
    pub timestamps: Vec<f64>,
    pub est: Vec<Pose>,
    pub gt: Vec<Pose>,
}

impl PairedTrajectory {
    pub fn len(&self) -> usize {
        self.est.len()
    }

    pub fn is_empty(&self) -> bool {
        self.est.is_empty()
    }

    fn skip(&self, n: usize) -> PairedTrajectory {
        let n = n.min(self.len());
        PairedTrajectory {
            timestamps: self.timestamps[n..].to_vec(),
            est: self.est[n..].to_vec(),
            gt: self.gt[n..].to_vec(),
        }
    }
}

fn median_step(records: &[PoseRecord]) -> Option<f64> {
    let mut steps: Vec<f64> = records.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
    if steps.is_empty() {
        return None;
    }
    steps.sort_by(f64::total_cmp);
    Some(steps[steps.len() / 2])
}

/// Pairs each estimate with the nearest ground-truth pose in time; a pair
/// must be within half a ground-truth period.
pub fn pair_by_timestamp(est: &[PoseRecord], gt: &[PoseRecord]) -> Result<PairedTrajectory, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::SequenceTooShort("empty ground truth".into()));
    }
    let tol = median_step(gt).map_or(f64::INFINITY, |p| 0.5 * p);
    let mut gt_sorted: Vec<&PoseRecord> = gt.iter().collect();
    gt_sorted.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut out = PairedTrajectory {
        timestamps: Vec::with_capacity(est.len()),
        est: Vec::with_capacity(est.len()),
        gt: Vec::with_capacity(est.len()),
    };
    for e in est {
        let idx = gt_sorted.partition_point(|g| g.timestamp < e.timestamp);
        let best = [idx.checked_sub(1), (idx < gt_sorted.len()).then_some(idx)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                let da = (gt_sorted[a].timestamp - e.timestamp).abs();
                let db = (gt_sorted[b].timestamp - e.timestamp).abs();
                da.total_cmp(&db)
            })
            .expect("non-empty ground truth");
        let g = gt_sorted[best];
        if (g.timestamp - e.timestamp).abs() > tol {
            return Err(EvalError::Unpaired(e.timestamp));
        }
        out.timestamps.push(e.timestamp);
        out.est.push(e.pose);
        out.gt.push(g.pose);
    }
    Ok(out)
}

/// Cumulative path length along a world-from-vehicle trajectory.
pub fn cumulative_distance(poses: &[Pose]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut d = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            d += (p.translation - poses[i - 1].translation).norm();
        }
        out.push(d);
    }
    out
}

pub fn path_length(poses: &[Pose]) -> f64 {
    cumulative_distance(poses).last().copied().unwrap_or(0.0)
}

/// `(gt_i^-1 gt_j)^-1 (est_i^-1 est_j)`.
fn relative_error(est_i: &Pose, est_j: &Pose, gt_i: &Pose, gt_j: &Pose) -> Pose {
    let gt_rel = gt_i.inverse().compose(gt_j);
    let est_rel = est_i.inverse().compose(est_j);
    gt_rel.inverse().compose(&est_rel)
}

pub fn kitti_segments(traj: &PairedTrajectory) -> Vec<SegmentError> {
    let dist = cumulative_distance(&traj.gt);
    let mut out = Vec::new();
    for i in 0..traj.len() {
        for &len in &SEGMENT_LENGTHS {
            let target = dist[i] + len;
            let j = i + dist[i..].partition_point(|&d| d < target);
            if j >= traj.len() {
                continue;
            }
            let e = relative_error(&traj.est[i], &traj.est[j], &traj.gt[i], &traj.gt[j]);
            out.push(SegmentError {
                start_frame: i,
                length: len,
                translation_error: 100.0 * e.translation.norm() / len,
                rotation_error_deg_per_m: rotation_angle(&e.rotation).to_degrees() / len,
            });
        }
    }
    out
}

pub fn frame_to_frame_errors(traj: &PairedTrajectory) -> Vec<FrameError> {
    (1..traj.len())
        .map(|j| {
            let e = relative_error(&traj.est[j - 1], &traj.est[j], &traj.gt[j - 1], &traj.gt[j]);
            FrameError {
                frame: j,
                translation_m: e.translation.norm(),
                rotation_deg: rotation_angle(&e.rotation).to_degrees(),
            }
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean KITTI translation (percent) and rotation (deg/m) errors.
pub fn kitti_rte(est: &[PoseRecord], gt: &[PoseRecord], exclude_first: usize) -> Result<(f64, f64), EvalError> {
    let traj = pair_by_timestamp(est, gt)?.skip(exclude_first);
    let segs = kitti_segments(&traj);
    if segs.is_empty() {
        return Err(EvalError::SequenceTooShort(format!(
            "{:.1} m of ground-truth path, need at least {} m",
            path_length(&traj.gt),
            SEGMENT_LENGTHS[0]
        )));
    }
    Ok((
        mean(segs.iter().map(|s| s.translation_error)),
        mean(segs.iter().map(|s| s.rotation_error_deg_per_m)),
    ))
}

/// Mean frame-to-frame translation (m) and rotation (deg) errors.
pub fn frame_to_frame_rte(
    est: &[PoseRecord],
    gt: &[PoseRecord],
    exclude_first: usize,
) -> Result<(f64, f64), EvalError> {
    let traj = pair_by_timestamp(est, gt)?.skip(exclude_first);
    let errs = frame_to_frame_errors(&traj);
    if errs.is_empty() {
        return Err(EvalError::SequenceTooShort("fewer than two evaluated frames".into()));
    }
    Ok((
        mean(errs.iter().map(|e| e.translation_m)),
        mean(errs.iter().map(|e| e.rotation_deg)),
    ))
}

/// Full report. KITTI fields are NaN when no 100 m segment exists; the
/// frame-to-frame part still requires two frames.
pub fn evaluate(est: &[PoseRecord], gt: &[PoseRecord], exclude_first: usize) -> Result<MetricsReport, EvalError> {
    let paired = pair_by_timestamp(est, gt)?;
    let excluded = exclude_first.min(paired.len());
    let traj = paired.skip(exclude_first);
    let frame_errors: Vec<FrameError> = frame_to_frame_errors(&traj)
        .into_iter()
        .map(|e| FrameError {
            frame: e.frame + excluded,
            ..e
        })
        .collect();
    if frame_errors.is_empty() {
        return Err(EvalError::SequenceTooShort("fewer than two evaluated frames".into()));
    }
    let segments: Vec<SegmentError> = kitti_segments(&traj)
        .into_iter()
        .map(|s| SegmentError {
            start_frame: s.start_frame + excluded,
            ..s
        })
        .collect();
    let (rte, rre) = if segments.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            mean(segments.iter().map(|s| s.translation_error)),
            mean(segments.iter().map(|s| s.rotation_error_deg_per_m)),
        )
    };
    Ok(MetricsReport {
        kitti_rte_percent: rte,
        kitti_rre_deg_per_m: rre,
        f2f_rte_m: mean(frame_errors.iter().map(|e| e.translation_m)),
        f2f_rre_deg: mean(frame_errors.iter().map(|e| e.rotation_deg)),
        segments,
        frame_errors,
        excluded_frames: excluded,
        evaluated_frames: traj.len(),
    })
}

/// Translation error of the whole run, start to end, relative to the
/// ground-truth path length.
pub fn end_to_end_error(traj: &PairedTrajectory) -> Result<f64, EvalError> {
    let n = traj.len();
    let len = path_length(&traj.gt);
    if n < 2 || len <= 0.0 {
        return Err(EvalError::SequenceTooShort("no motion to evaluate".into()));
    }
    let e = relative_error(&traj.est[0], &traj.est[n - 1], &traj.gt[0], &traj.gt[n - 1]);
    Ok(e.translation.norm() / len)
}

impl MetricsReport {
    /// Mean errors per segment length: `(length, rte_percent, rre_deg_per_m, count)`.
    pub fn per_length(&self) -> Vec<(f64, f64, f64, usize)> {
        SEGMENT_LENGTHS
            .iter()
            .filter_map(|&len| {
                let segs: Vec<&SegmentError> = self.segments.iter().filter(|s| s.length == len).collect();
                (!segs.is_empty()).then(|| {
                    (
                        len,
                        mean(segs.iter().map(|s| s.translation_error)),
                        mean(segs.iter().map(|s| s.rotation_error_deg_per_m)),
                        segs.len(),
                    )
                })
            })
            .collect()
    }

    /// Human-readable summary; KITTI figures read `n/a` when no segment fits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "evaluated frames   {}", self.evaluated_frames);
        let _ = writeln!(s, "excluded frames    {}", self.excluded_frames);
        let _ = writeln!(s, "KITTI RTE          {} %", or_na(self.kitti_rte_percent, 4));
        let _ = writeln!(s, "KITTI RRE          {} deg/m", or_na(self.kitti_rre_deg_per_m, 6));
        let _ = writeln!(s, "frame-to-frame RTE {:.5} m", self.f2f_rte_m);
        let _ = writeln!(s, "frame-to-frame RRE {:.5} deg", self.f2f_rre_deg);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>8} {:>10} {:>14} {:>8}", "length", "rte[%]", "rre[deg/m]", "count");
        for (len, t, r, n) in self.per_length() {
            let _ = writeln!(s, "{len:>8.0} {t:>10.4} {r:>14.6} {n:>8}");
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kitti_rte_percent = {}", self.kitti_rte_percent);
        let _ = writeln!(s, "kitti_rre_deg_per_m = {}", self.kitti_rre_deg_per_m);
        let _ = writeln!(s, "f2f_rte_m = {}", self.f2f_rte_m);
        let _ = writeln!(s, "f2f_rre_deg = {}", self.f2f_rre_deg);
        let _ = writeln!(s, "segments = {}", self.segments.len());
        let _ = writeln!(s, "excluded_frames = {}", self.excluded_frames);
        let _ = writeln!(s, "evaluated_frames = {}", self.evaluated_frames);
        s
    }

    /// Columns `length rte_percent rre_deg_per_m count`.
    pub fn segment_plot_data(&self) -> String {
        let mut s = String::from("# length rte_percent rre_deg_per_m count\n");
        for (len, t, r, n) in self.per_length() {
            let _ = writeln!(s, "{len} {t} {r} {n}");
        }
        s
    }

    /// Columns `frame f2f_translation_m f2f_rotation_deg`.
    pub fn frame_plot_data(&self) -> String {
        let mut s = String::from("# frame f2f_translation_m f2f_rotation_deg\n");
        for e in &self.frame_errors {
            let _ = writeln!(s, "{} {} {}", e.frame, e.translation_m, e.rotation_deg);
        }
        s
    }
}

fn or_na(v: f64, decimals: usize) -> String {
    if v.is_finite() {
        format!("{v:.decimals$}")
    } else {
        "n/a".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liealg::testing::{random_vec6, rng};
    use crate::liealg::{exp_se3, exp_so3};
    use nalgebra::Vector3;

    fn straight_line(n: usize, step: f64) -> Vec<PoseRecord> {
        (0..n)
            .map(|i| PoseRecord {
                timestamp: 0.1 * i as f64,
                pose: Pose::from_translation(Vector3::new(step * i as f64, 0.0, 0.0)),
            })
            .collect()
    }

    fn wiggly(n: usize) -> Vec<PoseRecord> {
        let mut r = rng(80);
        let mut pose = Pose::identity();
        (0..n)
            .map(|i| {
                let mut xi = random_vec6(&mut r, 0.02);
                xi[0] += 1.0;
                pose = pose.compose(&exp_se3(&xi));
                PoseRecord {
                    timestamp: 0.1 * i as f64,
                    pose,
                }
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = wiggly(400);
        let (t, r) = kitti_rte(&gt, &gt, 0).unwrap();
        assert_eq!(t, 0.0);
        assert!(r < 1e-6);
        let (ft, _) = frame_to_frame_rte(&gt, &gt, 0).unwrap();
        assert_eq!(ft, 0.0);
    }

    #[test]
    fn proportional_drift_gives_that_percentage() {
        let gt = straight_line(1001, 1.0);
        let est: Vec<PoseRecord> = gt
            .iter()
            .map(|g| PoseRecord {
                pose: Pose::from_translation(g.pose.translation * 1.01),
                ..*g
            })
            .collect();
        let (t, _) = kitti_rte(&est, &gt, 0).unwrap();
        assert!((t - 1.0).abs() < 0.01, "{t}");
    }

    #[test]
    fn short_sequence_is_rejected() {
        let gt = straight_line(50, 1.0);
        assert!(matches!(kitti_rte(&gt, &gt, 0), Err(EvalError::SequenceTooShort(_))));
        let gt = straight_line(150, 1.0);
        assert!(kitti_rte(&gt, &gt, 0).is_ok());
        assert!(matches!(kitti_rte(&gt, &gt, 60), Err(EvalError::SequenceTooShort(_))));
    }

    #[test]
    fn single_corrupted_step() {
        let gt = straight_line(101, 1.0);
        let mut est = gt.clone();
        for e in est.iter_mut().skip(50) {
            e.pose.translation.y += 0.1;
        }
        let (t, _) = frame_to_frame_rte(&est, &gt, 0).unwrap();
        assert!((t - 0.1 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_corruption_leaves_translation_metric() {
        let gt = straight_line(101, 1.0);
        // Rebuild the estimate from relative steps, one of them with an extra
        // rotation about the vehicle origin.
        let corruption = Pose::from_rotation(exp_so3(&Vector3::new(0.0, 0.0, 1f64.to_radians())));
        let mut est = gt.clone();
        for j in 1..gt.len() {
            let mut step = gt[j - 1].pose.inverse().compose(&gt[j].pose);
            if j == 50 {
                step = step.compose(&corruption);
            }
            est[j].pose = est[j - 1].pose.compose(&step);
        }
        let base = frame_to_frame_rte(&gt, &gt, 0).unwrap();
        let (t, r) = frame_to_frame_rte(&est, &gt, 0).unwrap();
        assert!((t - base.0).abs() < 1e-12);
        assert!((r - 1.0 / 100.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_invariant_to_global_transform() {
        let gt = wiggly(300);
        let mut r = rng(81);
        let est: Vec<PoseRecord> = gt
            .iter()
            .map(|g| PoseRecord {
                pose: g.pose.compose(&exp_se3(&random_vec6(&mut r, 0.01))),
                ..*g
            })
            .collect();
        let moved: Vec<PoseRecord> = est
            .iter()
            .map(|e| PoseRecord {
                pose: exp_se3(&random_vec6(&mut rng(82), 3.0)).compose(&e.pose),
                ..*e
            })
            .collect();
        let a = evaluate(&est, &gt, 0).unwrap();
        let b = evaluate(&moved, &gt, 0).unwrap();
        assert!((a.kitti_rte_percent - b.kitti_rte_percent).abs() < 1e-9);
        assert!((a.f2f_rte_m - b.f2f_rte_m).abs() < 1e-9);
    }

    #[test]
    fn pairing_uses_nearest_timestamp_within_tolerance() {
        let gt = straight_line(20, 1.0);
        let mut est = gt.clone();
        for e in &mut est {
            e.timestamp += 0.02;
        }
        let p = pair_by_timestamp(&est, &gt).unwrap();
        assert_eq!(p.gt[3].translation.x, 3.0);
        est[5].timestamp = 10.0;
        assert!(matches!(pair_by_timestamp(&est, &gt), Err(EvalError::Unpaired(_))));
    }

    #[test]
    fn report_is_consistent_with_segments() {
        let gt = wiggly(500);
        let mut r = rng(83);
        let est: Vec<PoseRecord> = gt
            .iter()
            .map(|g| PoseRecord {
                pose: g.pose.compose(&exp_se3(&random_vec6(&mut r, 0.05))),
                ..*g
            })
            .collect();
        let rep = evaluate(&est, &gt, 60).unwrap();
        assert_eq!(rep.excluded_frames, 60);
        let avg = rep.segments.iter().map(|s| s.translation_error).sum::<f64>() / rep.segments.len() as f64;
        assert!((avg - rep.kitti_rte_percent).abs() < 1e-12);
        assert!(rep.segments.iter().all(|s| s.start_frame >= 60));
        assert!(rep.to_text().contains("KITTI RTE"));
        assert!(rep.segment_plot_data().lines().count() > 1);
        assert_eq!(rep.frame_plot_data().lines().count(), rep.frame_errors.len() + 1);
    }
}
