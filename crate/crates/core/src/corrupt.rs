//! Seeded point-cloud corruptions: noise, deformation, density changes and
//! occlusion, plus two-way composition.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::{add, nearest_indices, norm, sub, uniform_sym, Point, PointCloud};
use crate::hull::hull_vertices;
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    Uniform,
    Gaussian,
    Background,
    Impulse,
    Upsampling,
    Rbf,
    RbfInv,
    DensityDec,
    DensityInc,
    Shear,
    Rotation,
    Cutout,
    DistortionFfd,
    Occlusion,
    Lidar,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        CorruptionKind::Uniform,
        CorruptionKind::Gaussian,
        CorruptionKind::Background,
        CorruptionKind::Impulse,
        CorruptionKind::Upsampling,
        CorruptionKind::Rbf,
        CorruptionKind::RbfInv,
        CorruptionKind::DensityDec,
        CorruptionKind::DensityInc,
        CorruptionKind::Shear,
        CorruptionKind::Rotation,
        CorruptionKind::Cutout,
        CorruptionKind::DistortionFfd,
        CorruptionKind::Occlusion,
        CorruptionKind::Lidar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Uniform => "uniform",
            CorruptionKind::Gaussian => "gaussian",
            CorruptionKind::Background => "background",
            CorruptionKind::Impulse => "impulse",
            CorruptionKind::Upsampling => "upsampling",
            CorruptionKind::Rbf => "rbf",
            CorruptionKind::RbfInv => "rbf_inv",
            CorruptionKind::DensityDec => "density_dec",
            CorruptionKind::DensityInc => "density_inc",
            CorruptionKind::Shear => "shear",
            CorruptionKind::Rotation => "rotation",
            CorruptionKind::Cutout => "cutout",
            CorruptionKind::DistortionFfd => "distortion_ffd",
            CorruptionKind::Occlusion => "occlusion",
            CorruptionKind::Lidar => "lidar",
        }
    }

    /// Minimum input size, nonzero for the cluster-based kinds.
    pub fn min_points(self) -> usize {
        match self {
            CorruptionKind::DensityDec | CorruptionKind::DensityInc | CorruptionKind::Cutout => CLUSTER_MIN_POINTS,
            _ => 1,
        }
    }

    /// Parameter record, as (name, value) pairs.
    pub fn parameters(self) -> &'static [(&'static str, f64)] {
        match self {
            CorruptionKind::Uniform => &[("half_range", UNIFORM_HALF)],
            CorruptionKind::Gaussian => &[("sigma", GAUSS_SIGMA), ("clip", GAUSS_CLIP)],
            CorruptionKind::Background => &[("fraction_denominator", 20.0), ("half_range", 1.0)],
            CorruptionKind::Impulse => &[("fraction_denominator", 20.0), ("magnitude", IMPULSE)],
            CorruptionKind::Upsampling => &[("fraction_denominator", 5.0), ("jitter", UNIFORM_HALF)],
            CorruptionKind::Rbf | CorruptionKind::RbfInv => {
                &[("control_points", RBF_CENTERS as f64), ("kernel_sigma", RBF_SIGMA), ("amplitude", RBF_AMPLITUDE)]
            }
            CorruptionKind::DensityDec => &[("clusters", CLUSTERS as f64), ("cluster_size", CLUSTER_SIZE as f64), ("removed_fraction", 0.75)],
            CorruptionKind::DensityInc => &[("clusters", CLUSTERS as f64), ("cluster_size", CLUSTER_SIZE as f64)],
            CorruptionKind::Shear => &[("scale_half_range", SHEAR), ("cross_half_range", SHEAR)],
            CorruptionKind::Rotation => &[("max_degrees", ROTATION_DEG)],
            CorruptionKind::Cutout => &[("clusters", CLUSTERS as f64), ("cluster_size", CLUSTER_SIZE as f64)],
            CorruptionKind::DistortionFfd => &[("lattice_per_axis", FFD_LATTICE as f64), ("displacement", FFD_SCALE * 0.5)],
            CorruptionKind::Occlusion => &[("camera_radius", CAMERA_RADIUS), ("flip_radius_factor", HPR_FACTOR)],
            CorruptionKind::Lidar => &[
                ("camera_radius", CAMERA_RADIUS),
                ("flip_radius_factor", HPR_FACTOR),
                ("angular_cell_rad", LIDAR_CELL),
                ("range_sigma", LIDAR_SIGMA),
            ],
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            CorruptionKind::Uniform => "independent uniform offset per axis",
            CorruptionKind::Gaussian => "normal offset per axis, rejection-truncated",
            CorruptionKind::Background => "floor(N/20) points appended uniformly in the cube [-1,1]^3",
            CorruptionKind::Impulse => "floor(N/20) points shifted by +-magnitude per axis",
            CorruptionKind::Upsampling => "floor(N/5) points duplicated with uniform jitter",
            CorruptionKind::Rbf => "Gaussian-kernel warp from random control points",
            CorruptionKind::RbfInv => "the rbf warp with its displacement field negated",
            CorruptionKind::DensityDec => "3/4 of the points inside 5 nearest-neighbour clusters removed",
            CorruptionKind::DensityInc => "cluster points kept, count restored by resampling the cloud",
            CorruptionKind::Shear => "x' = a x + s y, y' = b y with a, b in 1 +- 0.25 and s in +-0.25",
            CorruptionKind::Rotation => "rotation about z, y, x by independent angles",
            CorruptionKind::Cutout => "5 nearest-neighbour clusters removed",
            CorruptionKind::DistortionFfd => "Bernstein free-form deformation over the bounding box",
            CorruptionKind::Occlusion => "hidden-point removal from a random camera (spherical flip + convex hull)",
            CorruptionKind::Lidar => "occlusion, one point per angular cell, radial range noise",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown corruption kind `{s}`")))
    }
}

const UNIFORM_HALF: f64 = 0.05;
const GAUSS_SIGMA: f64 = 0.01;
const GAUSS_CLIP: f64 = 0.03;
const IMPULSE: f64 = 0.1;
const RBF_CENTERS: usize = 16;
const RBF_SIGMA: f64 = 0.5;
const RBF_AMPLITUDE: f64 = 0.1;
const CLUSTERS: usize = 5;
const CLUSTER_SIZE: usize = 100;
const CLUSTER_MIN_POINTS: usize = 600;
const SHEAR: f64 = 0.25;
const ROTATION_DEG: f64 = 15.0;
const FFD_LATTICE: usize = 5;
const FFD_SCALE: f64 = 0.1;
const CAMERA_RADIUS: f64 = 2.0;
const HPR_FACTOR: f64 = 100.0;
const LIDAR_CELL: f64 = 0.035;
const LIDAR_SIGMA: f64 = 0.01;

fn jitter_all(points: &[Point], rng: &mut Rng, mut offset: impl FnMut(&mut Rng) -> f64) -> Vec<Point> {
    points.iter().map(|p| [p[0] + offset(rng), p[1] + offset(rng), p[2] + offset(rng)]).collect()
}

fn truncated_normal(rng: &mut Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let v = GAUSS_SIGMA * z;
        if v.abs() <= GAUSS_CLIP {
            return v;
        }
    }
}

fn rbf_field(rng: &mut Rng) -> (Vec<Point>, Vec<Point>) {
    let centers = (0..RBF_CENTERS).map(|_| [uniform_sym(rng, 1.0), uniform_sym(rng, 1.0), uniform_sym(rng, 1.0)]).collect();
    let disp = (0..RBF_CENTERS)
        .map(|_| [uniform_sym(rng, RBF_AMPLITUDE), uniform_sym(rng, RBF_AMPLITUDE), uniform_sym(rng, RBF_AMPLITUDE)])
        .collect();
    (centers, disp)
}

/// Kernel-weighted displacement, divided by the total weight once it
/// exceeds one, so each axis stays within the amplitude.
fn rbf_displacement(p: Point, centers: &[Point], disp: &[Point]) -> Point {
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (c, d) in centers.iter().zip(disp) {
        let w = libm::exp(-crate::geom::dist2(p, *c) / (2.0 * RBF_SIGMA * RBF_SIGMA));
        total += w;
        for i in 0..3 {
            acc[i] += w * d[i];
        }
    }
    let denom = total.max(1.0);
    [acc[0] / denom, acc[1] / denom, acc[2] / denom]
}

/// Union of the `CLUSTER_SIZE` nearest neighbours of `CLUSTERS` random
/// center points, each cluster as a separate list.
fn clusters(points: &[Point], rng: &mut Rng) -> Vec<Vec<usize>> {
    (0..CLUSTERS)
        .map(|_| {
            let c = points[rng.random_range(0..points.len())];
            nearest_indices(points, c, CLUSTER_SIZE)
        })
        .collect()
}

fn keep_except(points: &[Point], removed: &BTreeSet<usize>) -> Vec<Point> {
    points.iter().enumerate().filter(|(i, _)| !removed.contains(i)).map(|(_, p)| *p).collect()
}

fn rotation_matrix(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = (libm::sin(ax), libm::cos(ax));
    let (sy, cy) = (libm::sin(ay), libm::cos(ay));
    let (sz, cz) = (libm::sin(az), libm::cos(az));
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(matmul3(rz, ry), rx)
}

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    core::array::from_fn(|i| core::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn apply3(m: &[[f64; 3]; 3], p: Point) -> Point {
    core::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn bernstein(n: usize, t: f64) -> Vec<f64> {
    (0..=n).map(|i| binomial(n, i) * libm::pow(t, i as f64) * libm::pow(1.0 - t, (n - i) as f64)).collect()
}

fn ffd(points: &[Point], rng: &mut Rng) -> Vec<Point> {
    let deg = FFD_LATTICE - 1;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let extent: Point = core::array::from_fn(|i| (hi[i] - lo[i]).max(1e-12));
    let lattice = FFD_LATTICE * FFD_LATTICE * FFD_LATTICE;
    let delta: Vec<Point> = (0..lattice)
        .map(|_| core::array::from_fn(|_| FFD_SCALE * uniform_sym(rng, 0.5)))
        .collect();
    // Bernstein weights sum to one and reproduce linear functions, so the
    // undisplaced lattice maps every point to itself.
    points
        .iter()
        .map(|p| {
            let b: [Vec<f64>; 3] = core::array::from_fn(|i| bernstein(deg, (p[i] - lo[i]) / extent[i]));
            let mut d = [0.0; 3];
            for i in 0..=deg {
                for j in 0..=deg {
                    for k in 0..=deg {
                        let w = b[0][i] * b[1][j] * b[2][k];
                        let dl = delta[(i * FFD_LATTICE + j) * FFD_LATTICE + k];
                        for a in 0..3 {
                            d[a] += w * dl[a];
                        }
                    }
                }
            }
            add(*p, d)
        })
        .collect()
}

fn random_camera(rng: &mut Rng) -> Point {
    let z = uniform_sym(rng, 1.0);
    let phi = rng.random_range(0.0..2.0 * PI);
    let r = libm::sqrt((1.0 - z * z).max(0.0));
    [CAMERA_RADIUS * r * libm::cos(phi), CAMERA_RADIUS * r * libm::sin(phi), CAMERA_RADIUS * z]
}

/// Hidden-point removal: points are flipped about a large sphere centered at
/// the camera, and those on the convex hull of the flipped set plus the
/// camera are visible. Returns ascending indices.
fn visible_from(points: &[Point], camera: Point) -> Vec<usize> {
    let rel: Vec<Point> = points.iter().map(|p| sub(*p, camera)).collect();
    let max_r = rel.iter().map(|v| norm(*v)).fold(0.0, f64::max);
    let big = HPR_FACTOR * max_r;
    let mut flipped: Vec<Point> = rel
        .iter()
        .map(|v| {
            let r = norm(*v).max(1e-300);
            let s = 2.0 * big / r - 1.0;
            [v[0] * s, v[1] * s, v[2] * s]
        })
        .collect();
    flipped.push([0.0; 3]);
    let n = points.len();
    hull_vertices(&flipped).into_iter().filter(|&i| i < n).collect()
}

fn occlusion(points: &[Point], rng: &mut Rng) -> (Vec<Point>, Point) {
    let camera = random_camera(rng);
    let vis = visible_from(points, camera);
    (vis.into_iter().map(|i| points[i]).collect(), camera)
}

fn lidar(points: &[Point], rng: &mut Rng) -> Vec<Point> {
    let (vis, camera) = occlusion(points, rng);
    // Keep the nearest point per (azimuth, elevation) cell as seen from the
    // camera; survivors keep their original order.
    let mut cells: BTreeMap<(i64, i64), (usize, f64)> = BTreeMap::new();
    for (i, p) in vis.iter().enumerate() {
        let v = sub(*p, camera);
        let r = norm(v);
        let az = libm::atan2(v[1], v[0]);
        let el = libm::asin((v[2] / r).clamp(-1.0, 1.0));
        let key = (libm::floor(az / LIDAR_CELL) as i64, libm::floor(el / LIDAR_CELL) as i64);
        let cell = cells.entry(key).or_insert((i, r));
        if r < cell.1 {
            *cell = (i, r);
        }
    }
    let mut kept: Vec<(usize, f64)> = cells.into_values().collect();
    kept.sort_by_key(|c| c.0);
    kept.into_iter()
        .map(|(i, r)| {
            let v = sub(vis[i], camera);
            let z: f64 = StandardNormal.sample(rng);
            let s = (r + LIDAR_SIGMA * z) / r;
            add(camera, [v[0] * s, v[1] * s, v[2] * s])
        })
        .collect()
}

/// Apply one corruption. The input is expected normalized; the result is
/// a pure function of `(cloud, kind, seed)`.
pub fn corrupt(cloud: &PointCloud, kind: CorruptionKind, seed: u64) -> Result<PointCloud> {
    let pts = cloud.points();
    let n = pts.len();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if n < kind.min_points() {
        return Err(Error::CloudTooSmall { needed: kind.min_points(), available: n });
    }
    if !cloud.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut rng = rng_from_seed(seed);
    let rng = &mut rng;
    let out = match kind {
        CorruptionKind::Uniform => jitter_all(pts, rng, |r| uniform_sym(r, UNIFORM_HALF)),
        CorruptionKind::Gaussian => jitter_all(pts, rng, truncated_normal),
        CorruptionKind::Background => {
            let mut out = pts.to_vec();
            for _ in 0..n / 20 {
                out.push([uniform_sym(rng, 1.0), uniform_sym(rng, 1.0), uniform_sym(rng, 1.0)]);
            }
            out
        }
        CorruptionKind::Impulse => {
            let mut out = pts.to_vec();
            let mut chosen: Vec<usize> = index::sample(rng, n, n / 20).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                for a in 0..3 {
                    out[i][a] += if rng.random::<bool>() { IMPULSE } else { -IMPULSE };
                }
            }
            out
        }
        CorruptionKind::Upsampling => {
            let mut out = pts.to_vec();
            let mut chosen: Vec<usize> = index::sample(rng, n, n / 5).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                let p = pts[i];
                out.push([
                    p[0] + uniform_sym(rng, UNIFORM_HALF),
                    p[1] + uniform_sym(rng, UNIFORM_HALF),
                    p[2] + uniform_sym(rng, UNIFORM_HALF),
                ]);
            }
            out
        }
        CorruptionKind::Rbf | CorruptionKind::RbfInv => {
            let (centers, disp) = rbf_field(rng);
            let sign = if kind == CorruptionKind::Rbf { 1.0 } else { -1.0 };
            pts.iter()
                .map(|p| {
                    let d = rbf_displacement(*p, &centers, &disp);
                    [p[0] + sign * d[0], p[1] + sign * d[1], p[2] + sign * d[2]]
                })
                .collect()
        }
        CorruptionKind::DensityDec => {
            let mut removed = BTreeSet::new();
            for cl in clusters(pts, rng) {
                for j in index::sample(rng, cl.len(), cl.len() * 3 / 4).iter() {
                    removed.insert(cl[j]);
                }
            }
            keep_except(pts, &removed)
        }
        CorruptionKind::DensityInc => {
            let kept: BTreeSet<usize> = clusters(pts, rng).into_iter().flatten().collect();
            let mut out: Vec<Point> = kept.iter().map(|&i| pts[i]).collect();
            let mut extra: Vec<usize> = index::sample(rng, n, n - kept.len()).into_vec();
            extra.sort_unstable();
            out.extend(extra.into_iter().map(|i| pts[i]));
            out
        }
        CorruptionKind::Shear => {
            let a = 1.0 + uniform_sym(rng, SHEAR);
            let b = 1.0 + uniform_sym(rng, SHEAR);
            let s = uniform_sym(rng, SHEAR);
            pts.iter().map(|p| [a * p[0] + s * p[1], b * p[1], p[2]]).collect()
        }
        CorruptionKind::Rotation => {
            let max = ROTATION_DEG * PI / 180.0;
            let (ax, ay, az) = (uniform_sym(rng, max), uniform_sym(rng, max), uniform_sym(rng, max));
            let m = rotation_matrix(ax, ay, az);
            pts.iter().map(|p| apply3(&m, *p)).collect()
        }
        CorruptionKind::Cutout => {
            let removed: BTreeSet<usize> = clusters(pts, rng).into_iter().flatten().collect();
            keep_except(pts, &removed)
        }
        CorruptionKind::DistortionFfd => ffd(pts, rng),
        CorruptionKind::Occlusion => occlusion(pts, rng).0,
        CorruptionKind::Lidar => lidar(pts, rng),
    };
    Ok(PointCloud::new(out))
}

/// Apply `kinds.0` with sub-seed `derive_seed(seed, 1)`, then `kinds.1` with
/// `derive_seed(seed, 2)`.
pub fn corrupt_compose(cloud: &PointCloud, kinds: (CorruptionKind, CorruptionKind), seed: u64) -> Result<PointCloud> {
    let first = corrupt(cloud, kinds.0, derive_seed(seed, 1))?;
    corrupt(&first, kinds.1, derive_seed(seed, 2))
}

/// Application rank for random pairs: cluster-based kinds run while the
/// cloud still has its full size and occlusion-style kinds run last.
fn stage(kind: CorruptionKind) -> u8 {
    match kind {
        CorruptionKind::DensityInc => 0,
        CorruptionKind::DensityDec => 1,
        CorruptionKind::Cutout => 2,
        CorruptionKind::Occlusion | CorruptionKind::Lidar => 4,
        _ => 3,
    }
}

/// Two distinct kinds drawn from `seed`, ordered so that every pair is
/// applicable to a full-size cloud.
pub fn random_pair(seed: u64) -> (CorruptionKind, CorruptionKind) {
    let mut rng = rng_from_seed(derive_seed(seed, 0x9A1B));
    let pick = index::sample(&mut rng, CorruptionKind::ALL.len(), 2);
    let (a, b) = (CorruptionKind::ALL[pick.index(0)], CorruptionKind::ALL[pick.index(1)]);
    if stage(b) < stage(a) {
        (b, a)
    } else {
        (a, b)
    }
}
