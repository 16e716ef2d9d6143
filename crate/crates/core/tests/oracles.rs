//! Geometry kernels against slow, obviously-correct reference versions.

use mate_core::autodiff::{Matrix, Tape};
use mate_core::geom::{
    chamfer_l2, farthest_point_sample, knn_group, masked_count, random_token_mask, Point, PointCloud,
};
use mate_core::rng::{rng_from_seed, Rng};
use proptest::prelude::*;
use rand::Rng as _;

const INSTANCES: u64 = 150;

fn d2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Continuous coordinates, or (when `lattice`) small integers so that
/// distance ties are common.
fn random_cloud(rng: &mut Rng, n: usize, lattice: bool) -> Vec<Point> {
    (0..n)
        .map(|_| {
            if lattice {
                [rng.random_range(-2..=2) as f64, rng.random_range(-2..=2) as f64, rng.random_range(-2..=2) as f64]
            } else {
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
            }
        })
        .collect()
}

/// Recomputes every candidate's distance to the whole selected set at each
/// step; lowest index wins ties.
fn fps_oracle(pts: &[Point], g: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < g {
        let mut best = 0;
        let mut best_d = -1.0;
        for i in 0..pts.len() {
            let d = sel.iter().map(|&s| d2(pts[i], pts[s])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        sel.push(best);
    }
    sel
}

/// Full stable sort of all points by distance, index as tie-breaker.
fn knn_oracle(pts: &[Point], c: Point, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| d2(pts[a], c).partial_cmp(&d2(pts[b], c)).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn chamfer_oracle(a: &[Point], b: &[Point]) -> f64 {
    let one_way = |x: &[Point], y: &[Point]| {
        let mut s = 0.0;
        for p in x {
            let mut m = f64::INFINITY;
            for q in y {
                m = m.min(d2(*p, *q));
            }
            s += m;
        }
        s / x.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

#[test]
fn fps_matches_brute_force() {
    let mut rng = rng_from_seed(11);
    for t in 0..INSTANCES {
        let n = rng.random_range(1..=64);
        let pts = random_cloud(&mut rng, n, t % 3 == 0);
        let g = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        let got = farthest_point_sample(&PointCloud::new(pts.clone()), g, start).unwrap();
        assert_eq!(got, fps_oracle(&pts, g, start), "instance {t}");
    }
}

#[test]
fn knn_matches_exhaustive_sort() {
    let mut rng = rng_from_seed(12);
    for t in 0..INSTANCES {
        let n = rng.random_range(1..=64);
        let pts = random_cloud(&mut rng, n, t % 2 == 0);
        let k = rng.random_range(1..=n);
        let centers: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..n)).collect();
        let tok = knn_group(&PointCloud::new(pts.clone()), &centers, k).unwrap();
        for (g, &ci) in centers.iter().enumerate() {
            let want = knn_oracle(&pts, pts[ci], k);
            assert_eq!(&tok.neighbors[g * k..(g + 1) * k], &want[..], "instance {t}");
            for (local, &j) in tok.patch(g).iter().zip(&want) {
                let p = pts[j];
                let c = pts[ci];
                assert_eq!(*local, [p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
            // The center is its own nearest neighbour at distance zero.
            assert!(tok.patch(g).contains(&[0.0; 3]));
        }
    }
}

#[test]
fn knn_patches_ignore_input_order() {
    let mut rng = rng_from_seed(13);
    for _ in 0..INSTANCES {
        let n = rng.random_range(8..=64);
        let pts = random_cloud(&mut rng, n, false);
        let k = rng.random_range(1..=n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
        let c = rng.random_range(0..n);
        let c_shuffled = perm.iter().position(|&i| i == c).unwrap();
        let sorted = |mut v: Vec<Point>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        let a = knn_group(&PointCloud::new(pts.clone()), &[c], k).unwrap();
        let b = knn_group(&PointCloud::new(shuffled), &[c_shuffled], k).unwrap();
        assert_eq!(sorted(a.patches), sorted(b.patches));
    }
}

#[test]
fn chamfer_matches_exhaustive_oracle() {
    let mut rng = rng_from_seed(14);
    for _ in 0..INSTANCES {
        let (na, nb) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let a = random_cloud(&mut rng, na, false);
        let b = random_cloud(&mut rng, nb, false);
        let got = chamfer_l2(&a, &b).unwrap();
        let want = chamfer_oracle(&a, &b);
        assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
    }
}

/// The tape node evaluates one Chamfer term per segment and averages them.
#[test]
fn batched_chamfer_node_matches_oracle() {
    let mut rng = rng_from_seed(15);
    for _ in 0..INSTANCES {
        let segs = rng.random_range(1..=6);
        let k = rng.random_range(1..=12);
        let pred = random_cloud(&mut rng, segs * k, false);
        let target = random_cloud(&mut rng, segs * k, false);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_points(&pred));
        let l = tape.chamfer(x, &target, k, k);
        let want = (0..segs)
            .map(|s| chamfer_oracle(&pred[s * k..(s + 1) * k], &target[s * k..(s + 1) * k]))
            .sum::<f64>()
            / segs as f64;
        let got = tape.scalar(l);
        assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
    }
}

#[test]
fn chamfer_examples() {
    assert_eq!(chamfer_l2(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
    let mut rng = rng_from_seed(16);
    let x = random_cloud(&mut rng, 20, false);
    assert_eq!(chamfer_l2(&x, &x).unwrap(), 0.0);
    assert!(chamfer_l2(&[], &x).is_err());
}

fn rotation(rng: &mut Rng) -> [[f64; 3]; 3] {
    // Gram-Schmidt on two random vectors.
    let u: Point = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let v: Point = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let e1 = [u[0] / nu, u[1] / nu, u[2] / nu];
    let dv = v[0] * e1[0] + v[1] * e1[1] + v[2] * e1[2];
    let w = [v[0] - dv * e1[0], v[1] - dv * e1[1], v[2] - dv * e1[2]];
    let nw = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let e2 = [w[0] / nw, w[1] / nw, w[2] / nw];
    let e3 = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
    [e1, e2, e3]
}

fn point_strategy() -> impl Strategy<Value = Point> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn chamfer_is_symmetric_nonnegative_and_rotation_invariant(
        a in prop::collection::vec(point_strategy(), 1..24),
        b in prop::collection::vec(point_strategy(), 1..24),
        seed in any::<u64>(),
    ) {
        let ab = chamfer_l2(&a, &b).unwrap();
        prop_assert_eq!(ab, chamfer_l2(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        let r = rotation(&mut rng_from_seed(seed));
        let rot = |p: &Point| -> Point { core::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) };
        let ra: Vec<Point> = a.iter().map(rot).collect();
        let rb: Vec<Point> = b.iter().map(rot).collect();
        prop_assert!((chamfer_l2(&ra, &rb).unwrap() - ab).abs() < 1e-9);
    }

    #[test]
    fn chamfer_is_zero_only_for_equal_sets(
        a in prop::collection::vec(point_strategy(), 1..24),
        extra in point_strategy(),
    ) {
        // Same set in a different order and with a duplicate: still zero.
        let mut b = a.clone();
        b.reverse();
        b.push(a[0]);
        prop_assert_eq!(chamfer_l2(&a, &b).unwrap(), 0.0);
        if !a.contains(&extra) {
            b.push(extra);
            prop_assert!(chamfer_l2(&a, &b).unwrap() > 0.0);
        }
    }
}

#[test]
fn mask_popcount_over_grid() {
    // Ratios i/1000 make the reference count an exact integer ceiling.
    let mut rng = rng_from_seed(17);
    for g in 1..=96usize {
        for i in (0..1000usize).step_by(25).chain([950, 975, 999]) {
            let m = i as f64 / 1000.0;
            let exact = (i * g).div_ceil(1000);
            let want = exact.min(g - 1);
            assert_eq!(masked_count(g, m).unwrap(), want, "g={g} m={m}");
            let mask = random_token_mask(g, m, &mut rng).unwrap();
            assert_eq!(mask.iter().filter(|&&b| b).count(), want);
            assert!(mask.iter().any(|&b| !b));
        }
    }
    assert_eq!(masked_count(64, 0.9).unwrap(), 58);
    assert!(random_token_mask(64, 0.0, &mut rng).unwrap().iter().all(|&b| !b));
    assert!(masked_count(8, 1.0).is_err());
    assert!(masked_count(8, -0.1).is_err());
}

#[test]
fn masks_follow_the_seed() {
    let a = random_token_mask(64, 0.9, &mut rng_from_seed(5)).unwrap();
    assert_eq!(a, random_token_mask(64, 0.9, &mut rng_from_seed(5)).unwrap());
    assert_ne!(a, random_token_mask(64, 0.9, &mut rng_from_seed(6)).unwrap());
}
