//! Geometry kernels: normalization, farthest-point sampling, KNN grouping,
//! token masking and the squared-L2 Chamfer distance.
//!
//! Ties are broken by the lowest index everywhere, so every kernel here has an
//! exact brute-force counterpart.

use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Point = [f64; 3];

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    libm::sqrt(dot(a, a))
}

#[inline]
pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// An ordered sequence of 3D points.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len().max(1) as f64;
        let s = self.points.iter().fold([0.0; 3], |acc, &p| add(acc, p));
        [s[0] / n, s[1] / n, s[2] / n]
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|&p| norm(p)).fold(0.0, f64::max)
    }

    /// Copy with non-finite points removed.
    pub fn finite_part(&self) -> PointCloud {
        PointCloud::new(
            self.points
                .iter()
                .copied()
                .filter(|p| p.iter().all(|c| c.is_finite()))
                .collect(),
        )
    }
}

impl From<Vec<Point>> for PointCloud {
    fn from(points: Vec<Point>) -> Self {
        Self::new(points)
    }
}

/// Center on the centroid and scale so the farthest point has unit norm.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptySet);
    }
    if !cloud.is_finite() {
        return Err(Error::NonFinite);
    }
    let c = cloud.centroid();
    let centered: Vec<Point> = cloud.points.iter().map(|&p| sub(p, c)).collect();
    let scale = centered.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::AllPointsIdentical);
    }
    let inv = 1.0 / scale;
    Ok(PointCloud::new(
        centered
            .into_iter()
            .map(|p| [p[0] * inv, p[1] * inv, p[2] * inv])
            .collect(),
    ))
}

/// Farthest-point sampling of `g` indices starting at `start`.
pub fn farthest_point_sample(cloud: &PointCloud, g: usize, start: usize) -> Result<Vec<usize>> {
    let pts = cloud.points();
    let n = pts.len();
    if g > n {
        return Err(Error::GTooLarge { requested: g, available: n });
    }
    if start >= n {
        return Err(Error::IndexOutOfRange { index: start, len: n });
    }
    let mut out = Vec::with_capacity(g);
    if g == 0 {
        return Ok(out);
    }
    let mut min_d = alloc::vec![f64::INFINITY; n];
    let mut cur = start;
    out.push(cur);
    for _ in 1..g {
        let c = pts[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
        out.push(cur);
    }
    Ok(out)
}

/// Indices of the `k` nearest points to `center` ordered by (distance, index).
pub fn nearest_indices(points: &[Point], center: Point, k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| (dist2(p, center), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < keyed.len() && k > 0 {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    keyed.truncate(k);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// A cloud split into `G` tokens: FPS centers plus `k` neighbours each in
/// center-relative coordinates, with a visibility mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCloud {
    pub centers: Vec<Point>,
    /// `G * k` local coordinates, token-major.
    pub patches: Vec<Point>,
    /// Source-cloud index of every patch point, aligned with `patches`.
    pub neighbors: Vec<usize>,
    pub group_size: usize,
    /// `true` = masked.
    pub mask: Vec<bool>,
    pub mask_ratio: f64,
}

impl TokenizedCloud {
    pub fn num_tokens(&self) -> usize {
        self.centers.len()
    }

    pub fn patch(&self, g: usize) -> &[Point] {
        &self.patches[g * self.group_size..(g + 1) * self.group_size]
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.num_tokens()).filter(|&g| !self.mask[g]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.num_tokens()).filter(|&g| self.mask[g]).collect()
    }

    pub fn with_mask(mut self, mask: Vec<bool>, ratio: f64) -> Result<Self> {
        if mask.len() != self.num_tokens() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "mask of length {} for {} tokens",
                mask.len(),
                self.num_tokens()
            )));
        }
        self.mask = mask;
        self.mask_ratio = ratio;
        Ok(self)
    }

    /// Similarity transform `p -> scale * p + shift` applied in token space.
    /// FPS and KNN are invariant under it, so this equals re-tokenizing the
    /// transformed cloud.
    pub fn scaled_shifted(&self, scale: f64, shift: Point) -> Self {
        let mut out = self.clone();
        for c in &mut out.centers {
            *c = [c[0] * scale + shift[0], c[1] * scale + shift[1], c[2] * scale + shift[2]];
        }
        for p in &mut out.patches {
            *p = [p[0] * scale, p[1] * scale, p[2] * scale];
        }
        out
    }
}

/// Group the `k` nearest neighbours of every center index into a token.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Result<TokenizedCloud> {
    let pts = cloud.points();
    let n = pts.len();
    if k > n {
        return Err(Error::KTooLarge { requested: k, available: n });
    }
    let mut centers = Vec::with_capacity(center_indices.len());
    let mut patches = Vec::with_capacity(center_indices.len() * k);
    let mut neighbors = Vec::with_capacity(center_indices.len() * k);
    for &ci in center_indices {
        if ci >= n {
            return Err(Error::IndexOutOfRange { index: ci, len: n });
        }
        let c = pts[ci];
        centers.push(c);
        for j in nearest_indices(pts, c, k) {
            patches.push(sub(pts[j], c));
            neighbors.push(j);
        }
    }
    Ok(TokenizedCloud {
        mask: alloc::vec![false; centers.len()],
        centers,
        patches,
        neighbors,
        group_size: k,
        mask_ratio: 0.0,
    })
}

/// FPS from index 0 followed by KNN grouping; mask all-false.
pub fn tokenize(cloud: &PointCloud, g: usize, k: usize) -> Result<TokenizedCloud> {
    let centers = farthest_point_sample(cloud, g, 0)?;
    knn_group(cloud, &centers, k)
}

/// Number of masked tokens for ratio `m`: `ceil(m * g)`, capped at `g - 1`
/// so one token always stays visible.
///
/// The product is rounded down by `1e-9` before the ceiling so that ratios
/// like `0.7` do not pick up an extra token from binary representation error.
pub fn masked_count(g: usize, m: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&m) || m.is_nan() {
        return Err(Error::MaskRatioOutOfRange(m));
    }
    if g == 0 {
        return Err(Error::EmptyVisibleSet);
    }
    let raw = libm::ceil(m * g as f64 - 1e-9).max(0.0) as usize;
    Ok(raw.min(g - 1))
}

/// Random bitmap with exactly [`masked_count`] `true` entries chosen without
/// replacement.
pub fn random_token_mask(g: usize, m: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    let count = masked_count(g, m)?;
    let mut mask = alloc::vec![false; g];
    for i in index::sample(rng, g, count).iter() {
        mask[i] = true;
    }
    Ok(mask)
}

/// Keep at most `max_points` points, chosen uniformly without replacement and
/// kept in their original order.
pub fn subsample(cloud: &PointCloud, max_points: usize, rng: &mut Rng) -> PointCloud {
    if cloud.len() <= max_points {
        return cloud.clone();
    }
    let mut idx = index::sample(rng, cloud.len(), max_points).into_vec();
    idx.sort_unstable();
    PointCloud::new(idx.into_iter().map(|i| cloud.points()[i]).collect())
}

/// Uniform draw in `[-half, half]`.
pub fn uniform_sym(rng: &mut Rng, half: f64) -> f64 {
    if half == 0.0 {
        return 0.0;
    }
    rng.random_range(-half..=half)
}

fn nearest(set: &[Point], q: Point) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &p) in set.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Symmetric squared-L2 Chamfer distance:
/// `mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2`.
pub fn chamfer_l2(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let fwd: f64 = a.iter().map(|&p| nearest(b, p).1).sum::<f64>() / a.len() as f64;
    let bwd: f64 = b.iter().map(|&q| nearest(a, q).1).sum::<f64>() / b.len() as f64;
    Ok(fwd + bwd)
}

/// Chamfer distance together with its gradients with respect to both sets.
pub fn chamfer_l2_grad(a: &[Point], b: &[Point]) -> Result<(f64, Vec<Point>, Vec<Point>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut ga = alloc::vec![[0.0; 3]; a.len()];
    let mut gb = alloc::vec![[0.0; 3]; b.len()];
    let wa = 2.0 / a.len() as f64;
    let wb = 2.0 / b.len() as f64;
    let mut fwd = 0.0;
    for (i, &p) in a.iter().enumerate() {
        let (j, d) = nearest(b, p);
        fwd += d;
        let diff = sub(p, b[j]);
        for c in 0..3 {
            ga[i][c] += wa * diff[c];
            gb[j][c] -= wa * diff[c];
        }
    }
    let mut bwd = 0.0;
    for (j, &q) in b.iter().enumerate() {
        let (i, d) = nearest(a, q);
        bwd += d;
        let diff = sub(q, a[i]);
        for c in 0..3 {
            gb[j][c] += wb * diff[c];
            ga[i][c] -= wb * diff[c];
        }
    }
    Ok((fwd / a.len() as f64 + bwd / b.len() as f64, ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = rng_from_seed(seed);
        PointCloud::new((0..n).map(|_| [uniform_sym(&mut rng, 1.0), uniform_sym(&mut rng, 1.0), uniform_sym(&mut rng, 1.0)]).collect())
    }

    #[test]
    fn normalize_fixed_point_and_symmetry() {
        let c = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, -0.5, 0.0]]);
        assert_eq!(normalize_cloud(&c).unwrap(), c);
        let c = PointCloud::new(vec![[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]]);
        assert_eq!(normalize_cloud(&c).unwrap().points(), &[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_random_postcondition() {
        let c = normalize_cloud(&random_cloud(64, 3)).unwrap();
        assert!(norm(c.centroid()) < 1e-6);
        assert!((c.max_norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn normalize_rejects_degenerate() {
        let c = PointCloud::new(vec![[0.3, 0.3, 0.3]; 5]);
        assert_eq!(normalize_cloud(&c), Err(Error::AllPointsIdentical));
        let c = PointCloud::new(vec![[f64::NAN, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(normalize_cloud(&c), Err(Error::NonFinite));
    }

    #[test]
    fn fps_collinear() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fps_exhaustion_is_permutation() {
        let c = random_cloud(20, 1);
        let mut idx = farthest_point_sample(&c, 20, 7).unwrap();
        assert_eq!(idx[0], 7);
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_oversized_request() {
        let c = random_cloud(5, 1);
        assert_eq!(farthest_point_sample(&c, 6, 0), Err(Error::GTooLarge { requested: 6, available: 5 }));
    }

    #[test]
    fn knn_k1_is_center() {
        let c = random_cloud(30, 2);
        let t = knn_group(&c, &[0, 5, 9], 1).unwrap();
        assert!(t.patches.iter().all(|p| *p == [0.0, 0.0, 0.0]));
        assert_eq!(knn_group(&c, &[0], 31).unwrap_err(), Error::KTooLarge { requested: 31, available: 30 });
    }

    #[test]
    fn knn_separated_clusters() {
        let mut pts = Vec::new();
        for i in 0..4 {
            pts.push([i as f64 * 0.01, 0.0, 0.0]);
        }
        for i in 0..4 {
            pts.push([100.0 + i as f64 * 0.01, 0.0, 0.0]);
        }
        let t = knn_group(&PointCloud::new(pts), &[0, 4], 4).unwrap();
        let mut a = t.neighbors[..4].to_vec();
        let mut b = t.neighbors[4..].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert_eq!(b, vec![4, 5, 6, 7]);
    }

    #[test]
    fn mask_counts() {
        let mut rng = rng_from_seed(0);
        let m = random_token_mask(64, 0.9, &mut rng).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 58);
        let m = random_token_mask(64, 0.0, &mut rng).unwrap();
        assert!(m.iter().all(|&b| !b));
        assert!(random_token_mask(8, 1.0, &mut rng).is_err());
        assert!(random_token_mask(8, -0.1, &mut rng).is_err());
        // 0.7 * 10 is 7.000000000000001 in binary floating point
        assert_eq!(masked_count(10, 0.7).unwrap(), 7);
        // ceil(0.95 * 16) = 16 would hide everything
        assert_eq!(masked_count(16, 0.95).unwrap(), 15);
    }

    #[test]
    fn mask_determinism() {
        let a = random_token_mask(64, 0.9, &mut rng_from_seed(11)).unwrap();
        let b = random_token_mask(64, 0.9, &mut rng_from_seed(11)).unwrap();
        let c = random_token_mask(64, 0.9, &mut rng_from_seed(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn chamfer_analytic() {
        assert_eq!(chamfer_l2(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        let x = random_cloud(9, 4);
        assert_eq!(chamfer_l2(x.points(), x.points()).unwrap(), 0.0);
        assert_eq!(chamfer_l2(&[], x.points()), Err(Error::EmptySet));
    }

    #[test]
    fn chamfer_grad_value_matches() {
        let a = random_cloud(7, 5);
        let b = random_cloud(5, 6);
        let (v, _, _) = chamfer_l2_grad(a.points(), b.points()).unwrap();
        assert_eq!(v, chamfer_l2(a.points(), b.points()).unwrap());
    }

    #[test]
    fn subsample_keeps_order_and_size() {
        let c = random_cloud(100, 8);
        let s = subsample(&c, 30, &mut rng_from_seed(1));
        assert_eq!(s.len(), 30);
        let pos: Vec<usize> = s.points().iter().map(|p| c.points().iter().position(|q| q == p).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}
