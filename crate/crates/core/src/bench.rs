//! Per-stage wall-time accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

pub const STAGE_ASSOCIATION: &str = "association";
pub const STAGE_FACTORS: &str = "factors";
pub const STAGE_SOLVE: &str = "linear_solve";
pub const STAGE_MARGINALIZATION: &str = "marginalization";
pub const STAGE_MAP_UPDATE: &str = "map_update";
pub const STAGE_IO: &str = "dataset_io";

/// Samples recorded per stage.
#[derive(Clone, Debug, Default)]
pub struct StageTimings {
    samples: BTreeMap<&'static str, Vec<Duration>>,
}

impl StageTimings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: &'static str, d: Duration) {
        self.samples.entry(stage).or_default().push(d);
    }

    /// Runs `f`, charging its duration to `stage`.
    pub fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(stage, start.elapsed());
        out
    }

    pub fn merge(&mut self, other: &StageTimings) {
        for (k, v) in &other.samples {
            self.samples.entry(k).or_default().extend_from_slice(v);
        }
    }

    pub fn total(&self, stage: &str) -> Duration {
        self.samples
            .get(stage)
            .map(|v| v.iter().sum())
            .unwrap_or_default()
    }

    pub fn stages(&self) -> impl Iterator<Item = (&'static str, &[Duration])> {
        self.samples.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub count: usize,
    pub total_s: f64,
    pub mean_s: f64,
    pub p95_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
    pub frames: usize,
    pub wall_time_s: f64,
    /// `None` when no frame was processed.
    pub hz: Option<f64>,
}

fn percentile95(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (0.95 * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

pub fn report(timings: &StageTimings, frames: usize, wall_time: Duration, include_io: bool) -> TimingReport {
    let stages = timings
        .stages()
        .filter(|(name, _)| include_io || *name != STAGE_IO)
        .map(|(name, samples)| {
            let mut secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
            secs.sort_by(f64::total_cmp);
            let total: f64 = secs.iter().sum();
            StageTiming {
                stage: name.to_string(),
                count: secs.len(),
                total_s: total,
                mean_s: if secs.is_empty() { 0.0 } else { total / secs.len() as f64 },
                p95_s: percentile95(&secs),
            }
        })
        .collect();
    let wall = wall_time.as_secs_f64();
    TimingReport {
        stages,
        frames,
        wall_time_s: wall,
        hz: (frames > 0 && wall > 0.0).then(|| frames as f64 / wall),
    }
}

impl TimingReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>8} {:>12} {:>12} {:>12}", "stage", "count", "total[s]", "mean[ms]", "p95[ms]");
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:<18} {:>8} {:>12.4} {:>12.4} {:>12.4}",
                st.stage,
                st.count,
                st.total_s,
                st.mean_s * 1e3,
                st.p95_s * 1e3
            );
        }
        let hz = self.hz.map_or("n/a".to_string(), |h| format!("{h:.3}"));
        let _ = writeln!(s, "frames = {}  wall = {:.3} s  rate = {} Hz", self.frames, self.wall_time_s, hz);
        s
    }

    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "wall_time_s = {}", self.wall_time_s);
        match self.hz {
            Some(h) => {
                let _ = writeln!(s, "hz = {h}");
            }
            None => {
                let _ = writeln!(s, "hz = \"n/a\"");
            }
        }
        for st in &self.stages {
            let _ = writeln!(s, "{}.count = {}", st.stage, st.count);
            let _ = writeln!(s, "{}.total_s = {}", st.stage, st.total_s);
            let _ = writeln!(s, "{}.mean_s = {}", st.stage, st.mean_s);
            let _ = writeln!(s, "{}.p95_s = {}", st.stage, st.p95_s);
        }
        s
    }

    pub fn stage_total(&self, stage: &str) -> f64 {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map_or(0.0, |s| s.total_s)
    }
}
