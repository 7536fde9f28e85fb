//! Frame preprocessing and the local map: voxel keypoint extraction, a sparse
//! voxel hash of world points, k-nearest-neighbor queries and PCA plane fits.

use rustc_hash::FxHashMap as HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::FrontendError;
use crate::liealg::HomogeneousPoint;

/// One lidar return in the sensor frame. `doppler` is the range-rate (negative
/// when the range is closing).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub position: HomogeneousPoint,
    pub timestamp: f64,
    pub doppler: Option<f64>,
}

impl LidarPoint {
    pub fn new(xyz: Vector3<f64>, timestamp: f64, doppler: Option<f64>) -> Self {
        Self {
            position: HomogeneousPoint::from_xyz(xyz),
            timestamp,
            doppler,
        }
    }

    pub fn range(&self) -> f64 {
        self.position.xyz.norm()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarFrame {
    pub index: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub points: Vec<LidarPoint>,
}

impl LidarFrame {
    pub fn new(index: usize, start_time: f64, end_time: f64, points: Vec<LidarPoint>) -> Self {
        Self {
            index,
            start_time,
            end_time,
            points,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Drops points farther than `limit` from the sensor.
    pub fn range_limited(&self, limit: f64) -> LidarFrame {
        LidarFrame {
            points: self
                .points
                .iter()
                .filter(|p| p.range() <= limit)
                .copied()
                .collect(),
            ..self.clone()
        }
    }

    /// Same frame with the Doppler channel removed.
    pub fn without_doppler(&self) -> LidarFrame {
        LidarFrame {
            points: self
                .points
                .iter()
                .map(|p| LidarPoint { doppler: None, ..*p })
                .collect(),
            ..self.clone()
        }
    }
}

pub type VoxelKey = [i64; 3];

pub fn voxel_key(p: &Vector3<f64>, grid: f64) -> VoxelKey {
    [
        (p.x / grid).floor() as i64,
        (p.y / grid).floor() as i64,
        (p.z / grid).floor() as i64,
    ]
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn voxel_draw(seed: u64, key: &VoxelKey) -> u64 {
    let mut h = splitmix64(seed);
    for k in key {
        h = splitmix64(h ^ (*k as u64));
    }
    h
}

/// Keeps one randomly chosen point per `grid`-sized voxel. The choice in each
/// voxel depends only on `seed` and the voxel key, so it is reproducible and
/// unaffected by points elsewhere in the frame. Output follows the order in
/// which voxels are first encountered.
pub fn extract_keypoints(
    frame: &LidarFrame,
    grid: f64,
    seed: u64,
) -> Result<LidarFrame, FrontendError> {
    if !(grid > 0.0) {
        return Err(FrontendError::InvalidGrid(grid));
    }
    if frame.points.is_empty() {
        return Err(FrontendError::EmptyFrame);
    }
    let mut order: Vec<VoxelKey> = Vec::new();
    let mut members: HashMap<VoxelKey, Vec<usize>> = HashMap::default();
    for (i, p) in frame.points.iter().enumerate() {
        let key = voxel_key(&p.position.xyz, grid);
        members
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    let points = order
        .iter()
        .map(|key| {
            let idx = &members[key];
            let pick = (voxel_draw(seed, key) % idx.len() as u64) as usize;
            frame.points[idx[pick]]
        })
        .collect();
    Ok(LidarFrame {
        points,
        ..frame.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalMapConfig {
    pub voxel_size: f64,
    pub max_points_per_voxel: usize,
    pub crop_radius: f64,
}

impl Default for LocalMapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            max_points_per_voxel: 20,
            crop_radius: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapPoint {
    pub xyz: Vector3<f64>,
    /// Global insertion counter; orders ties in neighbor queries.
    pub id: u64,
}

#[derive(Clone, Debug)]
pub struct LocalMap {
    config: LocalMapConfig,
    voxels: HashMap<VoxelKey, Vec<MapPoint>>,
    crop_center: Vector3<f64>,
    next_id: u64,
    len: usize,
}

impl LocalMap {
    pub fn new(config: LocalMapConfig) -> Self {
        Self {
            config,
            voxels: HashMap::default(),
            crop_center: Vector3::zeros(),
            next_id: 0,
            len: 0,
        }
    }

    pub fn config(&self) -> &LocalMapConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn crop_center(&self) -> Vector3<f64> {
        self.crop_center
    }

    pub fn set_crop_center(&mut self, center: Vector3<f64>) {
        self.crop_center = center;
    }

    pub fn points(&self) -> impl Iterator<Item = &MapPoint> {
        self.voxels.values().flatten()
    }

    pub fn voxel(&self, key: &VoxelKey) -> Option<&[MapPoint]> {
        self.voxels.get(key).map(Vec::as_slice)
    }

    /// Appends world-frame points (full voxels drop new points), then crops.
    pub fn insert_frame<'a>(&mut self, world_points: impl IntoIterator<Item = &'a Vector3<f64>>) {
        let cap = self.config.max_points_per_voxel;
        for p in world_points {
            let key = voxel_key(p, self.config.voxel_size);
            let cell = self.voxels.entry(key).or_default();
            if cell.len() < cap {
                cell.push(MapPoint {
                    xyz: *p,
                    id: self.next_id,
                });
                self.next_id += 1;
                self.len += 1;
            }
        }
        self.crop();
    }

    /// Removes every point farther than the crop radius from the crop center.
    /// Returns the number of points removed.
    pub fn crop(&mut self) -> usize {
        let r2 = self.config.crop_radius * self.config.crop_radius;
        let c = self.crop_center;
        let mut removed = 0;
        self.voxels.retain(|_, pts| {
            let before = pts.len();
            pts.retain(|p| (p.xyz - c).norm_squared() <= r2);
            removed += before - pts.len();
            !pts.is_empty()
        });
        self.len -= removed;
        removed
    }

    /// The `count` stored points closest to `query`, ascending by distance, ties
    /// by insertion order.
    pub fn nearest_neighbors(
        &self,
        query: &Vector3<f64>,
        count: usize,
    ) -> Result<Vec<MapPoint>, FrontendError> {
        self.search(query, count, f64::INFINITY)
    }

    /// Like `nearest_neighbors`, restricted to points within `radius` of
    /// `query`; may return fewer than `count`.
    pub fn nearest_within(
        &self,
        query: &Vector3<f64>,
        count: usize,
        radius: f64,
    ) -> Result<Vec<MapPoint>, FrontendError> {
        self.search(query, count, radius)
    }

    fn search(
        &self,
        query: &Vector3<f64>,
        count: usize,
        max_dist: f64,
    ) -> Result<Vec<MapPoint>, FrontendError> {
        if self.is_empty() {
            return Err(FrontendError::EmptyMap);
        }
        let count = count.min(self.len);
        if count == 0 {
            return Ok(Vec::new());
        }
        let vs = self.config.voxel_size;
        let center = voxel_key(query, vs);
        let max_sq = max_dist * max_dist;
        // Shells beyond this Chebyshev radius cannot hold points within max_dist.
        let last_shell = if max_dist.is_finite() {
            (max_dist / vs).ceil() as i64 + 1
        } else {
            i64::MAX
        };
        let order = |a: &(f64, u64, &MapPoint), b: &(f64, u64, &MapPoint)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let mut found: Vec<(f64, u64, &MapPoint)> = Vec::new();
        let mut seen = 0usize;
        let mut radius: i64 = 0;
        let finish = |mut found: Vec<(f64, u64, &MapPoint)>| {
            if found.len() > count {
                found.select_nth_unstable_by(count - 1, order);
                found.truncate(count);
            }
            found.sort_unstable_by(order);
            found.into_iter().map(|f| *f.2).collect::<Vec<_>>()
        };
        loop {
            // Add the shell at Chebyshev distance `radius`.
            for dx in -radius..=radius {
                for dy in -radius..=radius {
                    // Interior columns only touch the top and bottom faces.
                    let full = dx.abs() == radius || dy.abs() == radius;
                    let step = if full || radius == 0 { 1 } else { 2 * radius as usize };
                    for dz in (-radius..=radius).step_by(step) {
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(pts) = self.voxels.get(&key) {
                            seen += pts.len();
                            found.extend(
                                pts.iter()
                                    .map(|p| ((p.xyz - query).norm_squared(), p.id, p))
                                    .filter(|f| f.0 <= max_sq),
                            );
                        }
                    }
                }
            }
            // Every point within radius * vs of the query is now in `found`.
            if found.len() >= count {
                found.select_nth_unstable_by(count - 1, order);
                let kth = found[count - 1].0.sqrt();
                if kth <= radius as f64 * vs {
                    return Ok(finish(found));
                }
            }
            if seen == self.len || radius >= last_shell {
                return Ok(finish(found));
            }
            radius += 1;
        }
    }
}

/// Result of a PCA fit over a neighborhood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub centroid: Vector3<f64>,
    /// Covariance eigenvalues, descending.
    pub sigmas: [f64; 3],
    pub alpha: f64,
}

pub const MIN_PLANE_NEIGHBORS: usize = 5;

pub fn plane_fit(neighbors: &[Vector3<f64>]) -> Result<PlaneFit, FrontendError> {
    if neighbors.len() < MIN_PLANE_NEIGHBORS {
        return Err(FrontendError::DegenerateNeighborhood("fewer than 5 neighbors"));
    }
    let n = neighbors.len() as f64;
    let centroid = neighbors.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let sigmas = order.map(|i| eig.eigenvalues[i].max(0.0));
    if !(sigmas[0] > 0.0) {
        return Err(FrontendError::DegenerateNeighborhood("coincident points"));
    }
    let normal = eig.eigenvectors.column(order[2]).normalize();
    let alpha = ((sigmas[1] - sigmas[2]) / sigmas[0]).clamp(0.0, 1.0);
    Ok(PlaneFit {
        normal,
        centroid,
        sigmas,
        alpha,
    })
}

/// A keypoint matched to a map point with the local plane around it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub query: LidarPoint,
    pub map_point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub alpha: f64,
    pub sigmas: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    /// Neighbors used for the plane fit around the matched map point.
    pub plane_neighbors: usize,
    /// Matches farther than this are discarded (m).
    pub max_distance: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            plane_neighbors: 20,
            max_distance: 3.0,
        }
    }
}

/// Caches plane fits per map point while the map is not mutated.
#[derive(Default)]
pub struct PlaneCache {
    fits: HashMap<u64, Option<PlaneFit>>,
}

impl PlaneCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.fits.clear();
    }
}

/// Nearest map point to `world_xyz`, then a plane fit over its neighborhood.
/// Returns `None` when the match is too far or the neighborhood is degenerate.
pub fn associate(
    map: &LocalMap,
    query: &LidarPoint,
    world_xyz: &Vector3<f64>,
    config: &AssociationConfig,
    cache: &mut PlaneCache,
) -> Result<Option<Correspondence>, FrontendError> {
    let Some(&nearest) = map.nearest_within(world_xyz, 1, config.max_distance)?.first() else {
        return Ok(None);
    };
    let fit = match cache.fits.get(&nearest.id) {
        Some(f) => *f,
        None => {
            let neigh: Vec<Vector3<f64>> = map
                .nearest_within(&nearest.xyz, config.plane_neighbors, config.max_distance)?
                .iter()
                .map(|p| p.xyz)
                .collect();
            let f = plane_fit(&neigh).ok();
            cache.fits.insert(nearest.id, f);
            f
        }
    };
    Ok(fit.map(|f| Correspondence {
        query: *query,
        map_point: nearest.xyz,
        normal: f.normal,
        alpha: f.alpha,
        sigmas: f.sigmas,
    }))
}
