//! Voxel surfel map and point-to-surfel data association.
//!
//! The accumulated map cloud is discretized into cubic cells; each cell
//! tracks incremental first/second raw moments of its points. Cells whose
//! covariance looks planar (plane-likeness score) get a plane fitted by
//! seeded RANSAC refined with a total-least-squares step, and map points
//! are associated to the plane of their cell when close enough.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::scan::{LidarPoint, Scan};
use crate::Result;

/// A plane `{p : n·p + d = 0}` with unit normal, canonicalized to `d ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub d: f64,
}

impl Plane {
    /// Builds the canonical representation: unit normal, `d ≥ 0` (and a
    /// positive leading normal component when `d` is zero).
    pub fn canonical(normal: Vector3<f64>, d: f64) -> Self {
        let norm = normal.norm();
        let mut n = normal / norm;
        let mut d = d / norm;
        let flip = if d.abs() > 1e-12 {
            d < 0.0
        } else {
            let lead = n.iter().find(|c| c.abs() > 1e-12).copied().unwrap_or(1.0);
            lead < 0.0
        };
        if flip {
            n = -n;
            d = -d;
        }
        Self { normal: n, d }
    }

    /// Signed point-to-plane distance.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.d
    }
}

/// Voxel index of a map-frame point (floor convention per axis).
pub fn cell_index(p: &Vector3<f64>, cell_size: f64) -> [i64; 3] {
    [
        (p.x / cell_size).floor() as i64,
        (p.y / cell_size).floor() as i64,
        (p.z / cell_size).floor() as i64,
    ]
}

/// One voxel cell: incremental raw moments plus the member points.
#[derive(Debug, Clone)]
pub struct VoxelCell {
    pub index: [i64; 3],
    pub count: usize,
    /// First raw moment E[x].
    pub mean: Vector3<f64>,
    /// Second raw moment E[x xᵀ].
    pub second_moment: Matrix3<f64>,
    /// (point id, map-frame position).
    pub points: Vec<(u64, Vector3<f64>)>,
}

impl VoxelCell {
    fn new(index: [i64; 3]) -> Self {
        Self {
            index,
            count: 0,
            mean: Vector3::zeros(),
            second_moment: Matrix3::zeros(),
            points: Vec::new(),
        }
    }

    fn insert(&mut self, id: u64, p: Vector3<f64>) {
        self.count += 1;
        let k = 1.0 / self.count as f64;
        self.mean += (p - self.mean) * k;
        self.second_moment += (p * p.transpose() - self.second_moment) * k;
        self.points.push((id, p));
    }

    /// Central second moment (covariance), derived from the raw moments.
    pub fn covariance(&self) -> Matrix3<f64> {
        self.second_moment - self.mean * self.mean.transpose()
    }
}

/// Plane-likeness score of a cell in `[0, 1]` from the sorted covariance
/// eigenvalues `λ0 ≤ λ1 ≤ λ2`: `2(λ1 − λ0)/(λ0 + λ1 + λ2)`. Returns `None`
/// when the cell population is below `min_points` (cell skipped, not an
/// error).
pub fn plane_likeness(cell: &VoxelCell, min_points: usize) -> Option<f64> {
    if cell.count < min_points {
        return None;
    }
    let mut ev: Vec<f64> = cell
        .covariance()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sum = ev[0] + ev[1] + ev[2];
    if sum <= 0.0 {
        return Some(0.0);
    }
    Some(2.0 * (ev[1] - ev[0]) / sum)
}

/// A fitted planar surface element of one cell.
#[derive(Debug, Clone, Copy)]
pub struct Surfel {
    pub plane: Plane,
    pub planarity: f64,
    pub cell: [i64; 3],
    pub points: usize,
}

/// One point-to-surfel pairing: the original LiDAR-frame point (with its
/// timestamp), the surfel, and the map-frame position used when the
/// association was made.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub point: LidarPoint,
    pub surfel: usize,
    pub plane: Plane,
    pub map_point: Vector3<f64>,
}

/// The voxelized map with fitted surfels.
#[derive(Debug, Clone)]
pub struct SurfelMap {
    cell_size: f64,
    cells: BTreeMap<[i64; 3], VoxelCell>,
    surfels: Vec<Surfel>,
    cell_surfel: BTreeMap<[i64; 3], usize>,
    skipped_non_finite: usize,
}

impl SurfelMap {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        Self {
            cell_size,
            cells: BTreeMap::new(),
            surfels: Vec::new(),
            cell_surfel: BTreeMap::new(),
            skipped_non_finite: 0,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn insert_point(&mut self, id: u64, p: Vector3<f64>) {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            self.skipped_non_finite += 1;
            return;
        }
        let idx = cell_index(&p, self.cell_size);
        self.cells
            .entry(idx)
            .or_insert_with(|| VoxelCell::new(idx))
            .insert(id, p);
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn skipped_non_finite(&self) -> usize {
        self.skipped_non_finite
    }

    pub fn cell(&self, idx: &[i64; 3]) -> Option<&VoxelCell> {
        self.cells.get(idx)
    }

    pub fn cells(&self) -> impl Iterator<Item = &VoxelCell> {
        self.cells.values()
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    /// Surfel covering the cell containing `p`, if any.
    pub fn surfel_at(&self, p: &Vector3<f64>) -> Option<(usize, &Surfel)> {
        let idx = cell_index(p, self.cell_size);
        let sid = *self.cell_surfel.get(&idx)?;
        Some((sid, &self.surfels[sid]))
    }

    /// Surfel of a specific cell, if any.
    pub fn surfel_in_cell(&self, idx: &[i64; 3]) -> Option<&Surfel> {
        self.cell_surfel.get(idx).map(|&sid| &self.surfels[sid])
    }

    /// Scores every cell and fits planes in the planar ones. Cells are
    /// visited in index order and each gets its own seeded RNG, so the
    /// result is independent of map insertion order and thread count.
    pub fn extract_surfels(&mut self, params: &SurfelParams, seed: u64) {
        self.surfels.clear();
        self.cell_surfel.clear();
        let mut out = Vec::new();
        for (idx, cell) in &self.cells {
            let Some(p) = plane_likeness(cell, params.min_cell_points) else {
                continue;
            };
            if p < params.planarity_min {
                continue;
            }
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ mix_index(idx));
            if let Some(plane) = fit_plane_ransac(
                cell,
                params.ransac_inlier_tol,
                params.ransac_iters,
                &mut rng,
            ) {
                out.push(Surfel {
                    plane,
                    planarity: p,
                    cell: *idx,
                    points: cell.count,
                });
            }
        }
        for (sid, s) in out.iter().enumerate() {
            self.cell_surfel.insert(s.cell, sid);
        }
        self.surfels = out;
    }

    /// Writes one JSON object per surfel (cell index, normal, offset,
    /// planarity, population) for visualization tooling.
    pub fn write_surfels_jsonl(&self, mut w: impl Write) -> Result<()> {
        for s in &self.surfels {
            let line = serde_json::json!({
                "cell": s.cell,
                "nx": s.plane.normal.x,
                "ny": s.plane.normal.y,
                "nz": s.plane.normal.z,
                "d": s.plane.d,
                "planarity": s.planarity,
                "count": s.points,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn mix_index(idx: &[i64; 3]) -> u64 {
    // splitmix64-style mix of the cell index for per-cell RNG streams.
    let mut h = 0x9e3779b97f4a7c15u64;
    for &c in idx {
        h ^= c as u64;
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d049bb133111eb);
        h ^= h >> 31;
    }
    h
}

/// Surfel extraction parameters.
#[derive(Debug, Clone, Copy)]
pub struct SurfelParams {
    pub planarity_min: f64,
    pub min_cell_points: usize,
    pub ransac_iters: usize,
    pub ransac_inlier_tol: f64,
}

impl Default for SurfelParams {
    fn default() -> Self {
        Self {
            planarity_min: 0.6,
            min_cell_points: 10,
            ransac_iters: 50,
            ransac_inlier_tol: 0.02,
        }
    }
}

/// Builds the voxel map from scans, transforming each point into the map
/// frame with `to_map` (returning `None` drops the point). The closure
/// abstracts over rigid per-scan poses and continuous-time transforms.
pub fn build_map<F>(scans: &[Scan], mut to_map: F, cell_size: f64) -> SurfelMap
where
    F: FnMut(usize, &LidarPoint) -> Option<Vector3<f64>>,
{
    let mut map = SurfelMap::new(cell_size);
    let mut id = 0u64;
    for (si, scan) in scans.iter().enumerate() {
        for pt in &scan.points {
            if let Some(p) = to_map(si, pt) {
                map.insert_point(id, p);
            }
            id += 1;
        }
    }
    map
}

/// RANSAC plane fit over one cell: best 3-point hypothesis by inlier count,
/// refined by total least squares over its inliers. Returns `None` when the
/// best hypothesis covers less than half the cell or every sample triple is
/// degenerate.
pub fn fit_plane_ransac(
    cell: &VoxelCell,
    inlier_tol: f64,
    iters: usize,
    rng: &mut impl Rng,
) -> Option<Plane> {
    let pts = &cell.points;
    if pts.len() < 3 {
        return None;
    }
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..iters {
        let a = pts[rng.random_range(0..pts.len())].1;
        let b = pts[rng.random_range(0..pts.len())].1;
        let c = pts[rng.random_range(0..pts.len())].1;
        let n = (b - a).cross(&(c - a));
        if n.norm() < 1e-12 {
            continue; // collinear or repeated sample
        }
        let plane = Plane::canonical(n, -n.dot(&a));
        let inliers = pts
            .iter()
            .filter(|(_, p)| plane.distance(p).abs() <= inlier_tol)
            .count();
        if best.as_ref().map_or(true, |(bc, _)| inliers > *bc) {
            best = Some((inliers, plane));
        }
    }
    let (count, plane) = best?;
    if count * 2 < pts.len() {
        return None;
    }
    // Total-least-squares refinement over the hypothesis inliers, with a
    // MAD trim so points of a second plane grazing the tolerance band
    // (cells straddling a plane intersection) cannot tilt the fit.
    let mut kept: Vec<Vector3<f64>> = pts
        .iter()
        .filter(|(_, p)| plane.distance(p).abs() <= inlier_tol)
        .map(|(_, p)| *p)
        .collect();
    let mut current = plane;
    for _ in 0..2 {
        let mut absr: Vec<f64> = kept.iter().map(|p| current.distance(p).abs()).collect();
        absr.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mad = absr[absr.len() / 2];
        let gate = (3.0 * 1.4826 * mad).max(1e-7);
        let trimmed: Vec<Vector3<f64>> = kept
            .iter()
            .filter(|p| current.distance(p).abs() <= gate)
            .copied()
            .collect();
        if trimmed.len() < 3 {
            break;
        }
        current = tls_plane(&trimmed);
        kept = trimmed;
    }
    Some(current)
}

/// Plane through the centroid with the smallest-eigenvector normal.
pub fn tls_plane(points: &[Vector3<f64>]) -> Plane {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut min_i = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let normal = eig.eigenvectors.column(min_i).into_owned();
    Plane::canonical(normal, -normal.dot(&centroid))
}

/// Associates map-frame points with the surfel of their cell, keeping only
/// points within `reject_dist` of the plane.
pub fn associate(
    points: &[(LidarPoint, Vector3<f64>)],
    map: &SurfelMap,
    reject_dist: f64,
) -> Vec<Correspondence> {
    points
        .iter()
        .filter_map(|(pt, map_p)| {
            let (sid, surfel) = map.surfel_at(map_p)?;
            if surfel.plane.distance(map_p).abs() > reject_dist {
                return None;
            }
            Some(Correspondence {
                point: *pt,
                surfel: sid,
                plane: surfel.plane,
                map_point: *map_p,
            })
        })
        .collect()
}

/// Drops correspondences whose point also lies within `reject_dist` of a
/// differently-oriented surfel in one of the 26 neighboring cells. Points
/// near the intersection line of two planes are ambiguous: they fall into
/// a cell dominated by one plane while actually belonging to the other,
/// and their residuals would bias the optimization.
pub fn filter_ambiguous(
    corrs: Vec<Correspondence>,
    map: &SurfelMap,
    reject_dist: f64,
    min_normal_dot: f64,
) -> Vec<Correspondence> {
    corrs
        .into_iter()
        .filter(|c| {
            let own = cell_index(&c.map_point, map.cell_size);
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        let idx = [own[0] + dx, own[1] + dy, own[2] + dz];
                        let Some(&sid) = map.cell_surfel.get(&idx) else {
                            continue;
                        };
                        if sid == c.surfel {
                            continue;
                        }
                        let other = &map.surfels[sid];
                        if other.plane.normal.dot(&c.plane.normal).abs() < min_normal_dot
                            && other.plane.distance(&c.map_point).abs() <= reject_dist
                        {
                            return false;
                        }
                    }
                }
            }
            true
        })
        .collect()
}

/// Keeps each point independently with probability `keep_ratio`
/// (deterministic under `seed`).
pub fn downsample(scan: &Scan, keep_ratio: f64, seed: u64) -> Scan {
    assert!(
        keep_ratio > 0.0 && keep_ratio <= 1.0,
        "keep ratio must be in (0, 1]"
    );
    if keep_ratio >= 1.0 {
        return scan.clone();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let points = scan
        .points
        .iter()
        .filter(|_| rng.random::<f64>() < keep_ratio)
        .copied()
        .collect();
    Scan::new(scan.ref_time, points)
}
