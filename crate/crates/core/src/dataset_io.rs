//! On-disk formats: binary point frames, the frame manifest, and pose files.
//!
//! A dataset directory holds `manifest.txt` (`index start_time end_time` per
//! line), one `frames/NNNNNN.bin` per frame, and optionally
//! `groundtruth.txt`. Frame records are 20 bytes, little-endian `f32`:
//! `x y z relative_time doppler`, with NaN marking a missing Doppler value.
//! Pose files hold `timestamp r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2`
//! per line, world-from-vehicle.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::debug;
use nalgebra::{Matrix3, Vector3};

use crate::error::DatasetError;
use crate::frontend::{LidarFrame, LidarPoint};
use crate::liealg::Pose;

pub const RECORD_BYTES: usize = 20;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FRAMES_DIR: &str = "frames";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

/// Tolerance on reading rotations from pose files.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub start_time: f64,
    pub end_time: f64,
}

/// A timestamped world-from-vehicle pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRecord {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Anything that yields frames in order. Adapters for other recording
/// formats only need to implement `Iterator` with this item type.
pub trait FrameSource: Iterator<Item = Result<LidarFrame, DatasetError>> {}

impl<T: Iterator<Item = Result<LidarFrame, DatasetError>>> FrameSource for T {}

pub fn encode_frame(frame: &LidarFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.points.len() * RECORD_BYTES);
    for p in &frame.points {
        let xyz = p.position.xyz;
        let fields = [
            xyz.x as f32,
            xyz.y as f32,
            xyz.z as f32,
            (p.timestamp - frame.start_time) as f32,
            p.doppler.map_or(f32::NAN, |d| d as f32),
        ];
        for f in fields {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out
}

pub fn decode_frame(bytes: &[u8], entry: &ManifestEntry, path: &str) -> Result<LidarFrame, DatasetError> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(DatasetError::MalformedRecord {
            path: path.to_string(),
            reason: format!("{} bytes is not a multiple of {RECORD_BYTES}", bytes.len()),
        });
    }
    let span = entry.end_time - entry.start_time;
    // Relative times are stored as f32; allow for their rounding at the end.
    let slack = span.abs() * f32::EPSILON as f64;
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |k: usize| f32::from_le_bytes([rec[4 * k], rec[4 * k + 1], rec[4 * k + 2], rec[4 * k + 3]]);
        let rel = f(3) as f64;
        if !(rel >= 0.0 && rel <= span + slack) {
            return Err(DatasetError::TimestampOutOfRange {
                path: path.to_string(),
                t: entry.start_time + rel,
                start: entry.start_time,
                end: entry.end_time,
            });
        }
        let doppler = f(4);
        points.push(LidarPoint::new(
            Vector3::new(f(0) as f64, f(1) as f64, f(2) as f64),
            entry.start_time + rel,
            (!doppler.is_nan()).then_some(doppler as f64),
        ));
    }
    debug!("{path}: {} points", points.len());
    Ok(LidarFrame::new(entry.index, entry.start_time, entry.end_time, points))
}

/// Round-trips a frame through the on-disk precision.
pub fn quantize_frame(frame: &LidarFrame) -> LidarFrame {
    let entry = ManifestEntry {
        index: frame.index,
        start_time: frame.start_time,
        end_time: frame.end_time,
    };
    decode_frame(&encode_frame(frame), &entry, "<memory>").expect("encoded frame decodes")
}

pub fn write_frame(path: &Path, frame: &LidarFrame) -> Result<(), DatasetError> {
    fs::write(path, encode_frame(frame))?;
    Ok(())
}

pub fn read_frame(path: &Path, entry: &ManifestEntry) -> Result<LidarFrame, DatasetError> {
    let bytes = fs::read(path)?;
    decode_frame(&bytes, entry, &path.display().to_string())
}

fn parse_fields(line: &str, path: &Path, lineno: usize, expected: usize) -> Result<Vec<f64>, DatasetError> {
    let parse_err = |reason: String| DatasetError::Parse {
        path: path.display().to_string(),
        line: lineno,
        reason,
    };
    let fields: Vec<f64> = line
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|e| parse_err(format!("{tok:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    if fields.len() != expected {
        return Err(parse_err(format!("expected {expected} fields, found {}", fields.len())));
    }
    Ok(fields)
}

/// Non-empty lines that are not `#` comments, with 1-based line numbers.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            out.push((i + 1, trimmed.to_string()));
        }
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    data_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            let mut toks = line.split_whitespace();
            let index = toks
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| DatasetError::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    reason: "missing frame index".into(),
                })?;
            let rest: Vec<&str> = toks.collect();
            let times = parse_fields(&rest.join(" "), path, lineno, 2)?;
            if !(times[1] > times[0]) {
                return Err(DatasetError::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    reason: format!("end time {} not after start time {}", times[1], times[0]),
                });
            }
            Ok(ManifestEntry {
                index,
                start_time: times[0],
                end_time: times[1],
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in entries {
        writeln!(w, "{} {} {}", e.index, e.start_time, e.end_time)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a ground-truth or estimated trajectory file.
pub fn read_trajectory(path: &Path) -> Result<Vec<PoseRecord>, DatasetError> {
    data_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            let v = parse_fields(&line, path, lineno, 13)?;
            let rotation = Matrix3::new(v[1], v[2], v[3], v[5], v[6], v[7], v[9], v[10], v[11]);
            let pose = Pose::new(rotation, Vector3::new(v[4], v[8], v[12]));
            let err = pose.orthonormality_error();
            if err > ORTHONORMAL_TOL {
                return Err(DatasetError::MalformedRecord {
                    path: format!("{}:{lineno}", path.display()),
                    reason: format!("rotation not orthonormal (error {err:e})"),
                });
            }
            Ok(PoseRecord { timestamp: v[0], pose })
        })
        .collect()
}

/// Writes poses in the ground-truth layout; values use the shortest
/// representation that reads back to the same `f64`.
pub fn write_trajectory(path: &Path, records: &[PoseRecord]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let m = &r.pose.rotation;
        let t = &r.pose.translation;
        write!(w, "{}", r.timestamp)?;
        for i in 0..3 {
            write!(w, " {} {} {} {}", m[(i, 0)], m[(i, 1)], m[(i, 2)], t[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reader over a dataset directory, yielding frames in manifest order.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    root: PathBuf,
    manifest: Vec<ManifestEntry>,
    cursor: usize,
}

impl DatasetDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let manifest = read_manifest(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root,
            manifest,
            cursor: 0,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn frame_path(&self, index: usize) -> PathBuf {
        frame_path(&self.root, index)
    }

    pub fn groundtruth_path(&self) -> PathBuf {
        self.root.join(GROUNDTRUTH_FILE)
    }

    /// Reads the frame with the given index regardless of the cursor.
    pub fn read(&self, index: usize) -> Result<LidarFrame, DatasetError> {
        let entry = self
            .manifest
            .iter()
            .find(|e| e.index == index)
            .ok_or(DatasetError::MissingFrame(index))?;
        read_frame(&self.frame_path(index), entry)
    }
}

impl Iterator for DatasetDir {
    type Item = Result<LidarFrame, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = *self.manifest.get(self.cursor)?;
        self.cursor += 1;
        let path = self.frame_path(entry.index);
        if !path.exists() {
            return Some(Err(DatasetError::MissingFrame(entry.index)));
        }
        Some(read_frame(&path, &entry))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.manifest.len() - self.cursor;
        (n, Some(n))
    }
}

pub fn frame_path(root: &Path, index: usize) -> PathBuf {
    root.join(FRAMES_DIR).join(format!("{index:06}.bin"))
}

/// Incremental dataset writer; the manifest is written on `finish`.
#[derive(Debug)]
pub struct DatasetWriter {
    root: PathBuf,
    manifest: Vec<ManifestEntry>,
}

impl DatasetWriter {
    pub fn create(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join(FRAMES_DIR))?;
        Ok(Self {
            root,
            manifest: Vec::new(),
        })
    }

    pub fn push(&mut self, frame: &LidarFrame) -> Result<(), DatasetError> {
        write_frame(&frame_path(&self.root, frame.index), frame)?;
        self.manifest.push(ManifestEntry {
            index: frame.index,
            start_time: frame.start_time,
            end_time: frame.end_time,
        });
        Ok(())
    }

    pub fn finish(self, groundtruth: Option<&[PoseRecord]>) -> Result<PathBuf, DatasetError> {
        write_manifest(&self.root.join(MANIFEST_FILE), &self.manifest)?;
        if let Some(gt) = groundtruth {
            write_trajectory(&self.root.join(GROUNDTRUTH_FILE), gt)?;
        }
        Ok(self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liealg::exp_se3;
    use crate::liealg::testing::{random_vec3, random_vec6, rng};
    use rand::Rng;

    fn random_frame(r: &mut impl Rng, n: usize) -> LidarFrame {
        let start = 12.3;
        let end = 12.4;
        let points = (0..n)
            .map(|_| {
                let rel = r.random_range(0.0f32..0.1) as f64;
                let doppler = r.random_bool(0.7).then(|| r.random_range(-20.0f32..20.0) as f64);
                let xyz = random_vec3(r, 100.0).map(|v| v as f32 as f64);
                LidarPoint::new(xyz, start + rel, doppler)
            })
            .collect();
        LidarFrame::new(7, start, end, points)
    }

    fn entry(f: &LidarFrame) -> ManifestEntry {
        ManifestEntry {
            index: f.index,
            start_time: f.start_time,
            end_time: f.end_time,
        }
    }

    #[test]
    fn frame_round_trip_is_bit_identical() {
        let mut r = rng(70);
        let dir = tempfile::tempdir().unwrap();
        let frame = quantize_frame(&random_frame(&mut r, 500));
        let path = dir.path().join("f.bin");
        write_frame(&path, &frame).unwrap();
        let back = read_frame(&path, &entry(&frame)).unwrap();
        assert_eq!(back.points.len(), frame.points.len());
        for (a, b) in back.points.iter().zip(&frame.points) {
            assert_eq!(a.position.xyz, b.position.xyz);
            assert_eq!(a.timestamp.to_bits(), b.timestamp.to_bits());
            assert_eq!(a.doppler.map(f64::to_bits), b.doppler.map(f64::to_bits));
        }
        assert_eq!(encode_frame(&back), encode_frame(&frame));
    }

    #[test]
    fn empty_file_gives_empty_frame() {
        let f = LidarFrame::new(0, 0.0, 0.1, vec![]);
        let back = decode_frame(&[], &entry(&f), "x").unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut r = rng(71);
        let frame = random_frame(&mut r, 3);
        let mut bytes = encode_frame(&frame);
        bytes.extend_from_slice(&[0u8; 21]);
        assert!(matches!(
            decode_frame(&bytes, &entry(&frame), "x"),
            Err(DatasetError::MalformedRecord { .. })
        ));
    }

    #[test]
    fn out_of_frame_timestamp_is_rejected() {
        let f = LidarFrame::new(0, 1.0, 1.1, vec![LidarPoint::new(Vector3::x(), 1.5, None)]);
        assert!(matches!(
            decode_frame(&encode_frame(&f), &entry(&f), "x"),
            Err(DatasetError::TimestampOutOfRange { .. })
        ));
    }

    #[test]
    fn nan_doppler_reads_as_absent() {
        let f = LidarFrame::new(0, 0.0, 0.1, vec![LidarPoint::new(Vector3::x(), 0.05, None)]);
        let back = quantize_frame(&f);
        assert_eq!(back.points[0].doppler, None);
    }

    #[test]
    fn trajectory_round_trip() {
        let mut r = rng(72);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let records: Vec<PoseRecord> = (0..1000)
            .map(|i| PoseRecord {
                timestamp: 0.1 * i as f64,
                pose: exp_se3(&random_vec6(&mut r, 2.0)),
            })
            .collect();
        write_trajectory(&path, &records).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1000);
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back, records);
        assert!(back.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
    }

    #[test]
    fn identity_trajectory_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let rec = PoseRecord {
            timestamp: 0.0,
            pose: Pose::identity(),
        };
        write_trajectory(&path, &[rec, rec]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        for line in text.lines() {
            assert_eq!(line, "0 1 0 0 0 0 1 0 0 0 0 1 0");
        }
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.txt");
        fs::write(&path, "0 1.001 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(read_trajectory(&path), Err(DatasetError::MalformedRecord { .. })));
        fs::write(&path, "0 1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        assert!(matches!(read_trajectory(&path), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let mut r = rng(73);
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<LidarFrame> = (0..3)
            .map(|i| {
                let mut f = quantize_frame(&random_frame(&mut r, 50));
                f.index = i;
                f
            })
            .collect();
        let mut w = DatasetWriter::create(dir.path()).unwrap();
        for f in &frames {
            w.push(f).unwrap();
        }
        w.finish(None).unwrap();
        let reader = DatasetDir::open(dir.path()).unwrap();
        assert_eq!(reader.manifest().len(), 3);
        let back: Vec<LidarFrame> = reader.collect::<Result<_, _>>().unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn missing_frame_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(
            &dir.path().join(MANIFEST_FILE),
            &[ManifestEntry {
                index: 4,
                start_time: 0.0,
                end_time: 0.1,
            }],
        )
        .unwrap();
        let mut reader = DatasetDir::open(dir.path()).unwrap();
        assert!(matches!(reader.next(), Some(Err(DatasetError::MissingFrame(4)))));
        assert!(reader.next().is_none());
    }
}
