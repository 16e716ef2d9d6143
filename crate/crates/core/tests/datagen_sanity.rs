//! The synthetic dataset is well formed and learnable from simple features.

use mate_core::datagen::{generate_shape, generate_split, DatasetSpec, ShapeClass, Split};
use mate_core::geom::Point;
use nalgebra::{Matrix3, SymmetricEigen};

fn covariance_eigenvalues(pts: &[Point]) -> [f64; 3] {
    let n = pts.len() as f64;
    let mean: [f64; 3] = core::array::from_fn(|i| pts.iter().map(|p| p[i]).sum::<f64>() / n);
    let mut c = Matrix3::<f64>::zeros();
    for p in pts {
        for i in 0..3 {
            for j in 0..3 {
                c[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    [ev[0], ev[1], ev[2]]
}

#[test]
fn planes_are_coplanar() {
    for seed in 0..20 {
        let c = generate_shape(ShapeClass::Plane, 256, seed).unwrap();
        assert!(covariance_eigenvalues(c.points())[0] < 1e-8, "seed {seed}");
    }
}

/// Sorted covariance spectrum plus radial quantiles.
fn features(pts: &[Point]) -> Vec<f64> {
    let mut r: Vec<f64> = pts.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).collect();
    r.sort_by(|a, b| a.total_cmp(b));
    let q = |f: f64| r[((r.len() - 1) as f64 * f) as usize];
    let ev = covariance_eigenvalues(pts);
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
    vec![ev[0], ev[1], ev[2], mean, std, q(0.1), q(0.5), q(0.9)]
}

#[test]
fn nearest_centroid_separates_classes() {
    let spec = DatasetSpec::default();
    let train = generate_split(&spec, Split::Train).unwrap();
    let test = generate_split(&spec, Split::Test).unwrap();
    let tf: Vec<Vec<f64>> = train.iter().map(|s| features(s.cloud.points())).collect();
    let dim = tf[0].len();
    let mean: Vec<f64> = (0..dim).map(|d| tf.iter().map(|f| f[d]).sum::<f64>() / tf.len() as f64).collect();
    let std: Vec<f64> = (0..dim)
        .map(|d| (tf.iter().map(|f| (f[d] - mean[d]).powi(2)).sum::<f64>() / tf.len() as f64).sqrt().max(1e-12))
        .collect();
    let z = |f: &[f64]| -> Vec<f64> { (0..dim).map(|d| (f[d] - mean[d]) / std[d]).collect() };
    let mut centroids = vec![vec![0.0; dim]; 8];
    let mut counts = [0usize; 8];
    for (s, f) in train.iter().zip(&tf) {
        for (c, v) in centroids[s.label].iter_mut().zip(z(f)) {
            *c += v;
        }
        counts[s.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let f = z(&features(s.cloud.points()));
            let d = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = (0..8).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            pred == s.label
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    println!("nearest-centroid test accuracy {acc:.3}");
    assert!(acc >= 0.70, "{acc}");
}
