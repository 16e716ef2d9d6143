//! Synthetic labeled shapes: eight surface samplers with per-sample random
//! proportions and yaw.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geom::{normalize_cloud, Point, PointCloud};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Pyramid,
    Helix,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 8] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Plane,
        ShapeClass::Pyramid,
        ShapeClass::Helix,
    ];

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Plane => "plane",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Helix => "helix",
        }
    }
}

pub const MIN_SHAPE_POINTS: usize = 64;

fn range(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn unit_vector(rng: &mut Rng) -> Point {
    let z = range(rng, -1.0, 1.0);
    let phi = range(rng, 0.0, 2.0 * PI);
    let r = libm::sqrt((1.0 - z * z).max(0.0));
    [r * libm::cos(phi), r * libm::sin(phi), z]
}

/// Index drawn proportionally to `weights`.
fn pick(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn disk(rng: &mut Rng, radius: f64, z: f64) -> Point {
    let r = radius * libm::sqrt(rng.random::<f64>());
    let t = range(rng, 0.0, 2.0 * PI);
    [r * libm::cos(t), r * libm::sin(t), z]
}

fn triangle(rng: &mut Rng, a: Point, b: Point, c: Point) -> Point {
    let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    core::array::from_fn(|i| a[i] + u * (b[i] - a[i]) + v * (c[i] - a[i]))
}

fn tri_area(a: Point, b: Point, c: Point) -> f64 {
    let u = crate::geom::sub(b, a);
    let v = crate::geom::sub(c, a);
    let x = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * crate::geom::norm(x)
}

/// Antipodal pairs plus, for odd counts, one equilateral triple, so the
/// centroid is the origin and normalization leaves every norm at 1.
fn sphere(rng: &mut Rng, n: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    let pairs = if n % 2 == 1 { (n - 3) / 2 } else { n / 2 };
    for _ in 0..pairs {
        let p = unit_vector(rng);
        pts.push(p);
        pts.push([-p[0], -p[1], -p[2]]);
    }
    if n % 2 == 1 {
        let t = range(rng, 0.0, 2.0 * PI);
        for j in 0..3 {
            let a = t + 2.0 * PI * j as f64 / 3.0;
            pts.push([libm::cos(a), libm::sin(a), 0.0]);
        }
    }
    pts
}

fn cube(rng: &mut Rng, n: usize) -> Vec<Point> {
    let h = [range(rng, 0.4, 0.6), range(rng, 0.4, 0.6), range(rng, 0.4, 0.6)];
    // Face pairs normal to x, y, z.
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    (0..n)
        .map(|_| {
            let axis = pick(rng, &areas);
            let mut p: Point = core::array::from_fn(|i| range(rng, -h[i], h[i]));
            p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
            p
        })
        .collect()
}

fn cylinder(rng: &mut Rng, n: usize) -> Vec<Point> {
    let r = range(rng, 0.35, 0.55);
    let hh = range(rng, 0.5, 0.8);
    let weights = [2.0 * PI * r * 2.0 * hh, PI * r * r, PI * r * r];
    (0..n)
        .map(|_| match pick(rng, &weights) {
            0 => {
                let t = range(rng, 0.0, 2.0 * PI);
                [r * libm::cos(t), r * libm::sin(t), range(rng, -hh, hh)]
            }
            1 => disk(rng, r, hh),
            _ => disk(rng, r, -hh),
        })
        .collect()
}

fn cone(rng: &mut Rng, n: usize) -> Vec<Point> {
    let r = range(rng, 0.6, 0.8);
    let h = range(rng, 0.6, 0.9);
    let slant = libm::sqrt(r * r + h * h);
    let weights = [PI * r * slant, PI * r * r];
    (0..n)
        .map(|_| match pick(rng, &weights) {
            0 => {
                // Radius from the apex grows linearly, so its square is uniform.
                let s = libm::sqrt(rng.random::<f64>());
                let t = range(rng, 0.0, 2.0 * PI);
                [s * r * libm::cos(t), s * r * libm::sin(t), h * (1.0 - s)]
            }
            _ => disk(rng, r, 0.0),
        })
        .collect()
}

fn torus(rng: &mut Rng, n: usize) -> Vec<Point> {
    let big = range(rng, 0.6, 0.8);
    let small = range(rng, 0.15, 0.3);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let u = range(rng, 0.0, 2.0 * PI);
        let v = range(rng, 0.0, 2.0 * PI);
        // Area element is proportional to R + r cos v.
        if rng.random::<f64>() * (big + small) > big + small * libm::cos(v) {
            continue;
        }
        let w = big + small * libm::cos(v);
        pts.push([w * libm::cos(u), w * libm::sin(u), small * libm::sin(v)]);
    }
    pts
}

fn plane(rng: &mut Rng, n: usize) -> Vec<Point> {
    let a = range(rng, 0.4, 0.6);
    let b = range(rng, 0.4, 0.6);
    (0..n).map(|_| [range(rng, -a, a), range(rng, -b, b), 0.0]).collect()
}

fn pyramid(rng: &mut Rng, n: usize) -> Vec<Point> {
    let a = range(rng, 0.3, 0.45);
    let h = range(rng, 1.1, 1.5);
    let apex = [0.0, 0.0, h];
    let base = [[-a, -a, 0.0], [a, -a, 0.0], [a, a, 0.0], [-a, a, 0.0]];
    let mut tris: Vec<[Point; 3]> = (0..4).map(|i| [base[i], base[(i + 1) % 4], apex]).collect();
    tris.push([base[0], base[1], base[2]]);
    tris.push([base[0], base[2], base[3]]);
    let weights: Vec<f64> = tris.iter().map(|t| tri_area(t[0], t[1], t[2])).collect();
    (0..n)
        .map(|_| {
            let t = tris[pick(rng, &weights)];
            triangle(rng, t[0], t[1], t[2])
        })
        .collect()
}

fn helix(rng: &mut Rng, n: usize) -> Vec<Point> {
    let big = range(rng, 0.4, 0.6);
    let tube = range(rng, 0.04, 0.07);
    let turns = range(rng, 2.0, 3.0);
    let height = range(rng, 1.0, 1.6);
    let pitch = height / (2.0 * PI * turns);
    (0..n)
        .map(|_| {
            let t = range(rng, 0.0, 2.0 * PI * turns);
            let c = [big * libm::cos(t), big * libm::sin(t), pitch * t];
            // Frame around the curve: radial direction and its complement.
            let radial = [libm::cos(t), libm::sin(t), 0.0];
            let tangent = [-big * libm::sin(t), big * libm::cos(t), pitch];
            let tl = crate::geom::norm(tangent);
            let tangent = [tangent[0] / tl, tangent[1] / tl, tangent[2] / tl];
            let binormal = [
                tangent[1] * radial[2] - tangent[2] * radial[1],
                tangent[2] * radial[0] - tangent[0] * radial[2],
                tangent[0] * radial[1] - tangent[1] * radial[0],
            ];
            let a = range(rng, 0.0, 2.0 * PI);
            let (ca, sa) = (libm::cos(a), libm::sin(a));
            core::array::from_fn(|i| c[i] + tube * (ca * radial[i] + sa * binormal[i]))
        })
        .collect()
}

/// Surface sample of one shape with random proportions and yaw, normalized
/// to zero centroid and unit max norm.
pub fn generate_shape(class: ShapeClass, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points < MIN_SHAPE_POINTS {
        return Err(Error::CloudTooSmall { needed: MIN_SHAPE_POINTS, available: n_points });
    }
    let mut rng = rng_from_seed(seed);
    let raw = match class {
        ShapeClass::Sphere => sphere(&mut rng, n_points),
        ShapeClass::Cube => cube(&mut rng, n_points),
        ShapeClass::Cylinder => cylinder(&mut rng, n_points),
        ShapeClass::Cone => cone(&mut rng, n_points),
        ShapeClass::Torus => torus(&mut rng, n_points),
        ShapeClass::Plane => plane(&mut rng, n_points),
        ShapeClass::Pyramid => pyramid(&mut rng, n_points),
        ShapeClass::Helix => helix(&mut rng, n_points),
    };
    let yaw = range(&mut rng, 0.0, 2.0 * PI);
    let (c, s) = (libm::cos(yaw), libm::sin(yaw));
    let rotated = raw.into_iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]).collect();
    normalize_cloud(&PointCloud::new(rotated))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7241,
            Split::Val => 0x7A11,
            Split::Test => 0x7E57,
        }
    }
}

/// Per-class sample counts and cloud sizes of each split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub train_points: usize,
    /// Test clouds are larger so the cluster-based corruptions have room;
    /// the model subsamples them back to its input size.
    pub test_points: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { train_per_class: 100, val_per_class: 25, test_per_class: 25, train_points: 256, test_points: 1024, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }

    pub fn points(&self, split: Split) -> usize {
        match split {
            Split::Test => self.test_points,
            _ => self.train_points,
        }
    }

    /// Seed of the `index`-th sample of `class` in `split`.
    pub fn sample_seed(&self, split: Split, class: ShapeClass, index: usize) -> u64 {
        derive_seed(derive_seed(derive_seed(self.seed, split.tag()), class.label() as u64), index as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

/// All samples of one split, class-interleaved: sample `i` of every class
/// precedes sample `i + 1` of any class.
pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<LabeledCloud>> {
    let per = spec.per_class(split);
    let mut out = Vec::with_capacity(per * ShapeClass::ALL.len());
    for i in 0..per {
        for class in ShapeClass::ALL {
            let cloud = generate_shape(class, spec.points(split), spec.sample_seed(split, class, i))?;
            out.push(LabeledCloud { cloud, label: class.label() });
        }
    }
    Ok(out)
}
