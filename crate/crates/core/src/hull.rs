//! Incremental 3D convex hull, used by hidden-point removal.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::geom::{dist2, dot, norm, sub, Point};

fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Six times the signed volume of (a, b, c, p); positive when `p` lies on
/// the side the counter-clockwise normal of (a, b, c) points to.
fn orient(a: Point, b: Point, c: Point, p: Point) -> f64 {
    dot(cross(sub(b, a), sub(c, a)), sub(p, a))
}

struct Face {
    v: [usize; 3],
    alive: bool,
    /// Unprocessed points strictly above this face.
    outside: Vec<usize>,
}

/// Indices of the points that are vertices of the convex hull, ascending.
/// Fewer than four affinely independent points yield every index.
///
/// Quickhull order: the farthest outside point of some face is inserted
/// next, and only the outside sets of the faces it removes are re-examined.
pub fn hull_vertices(points: &[Point]) -> Vec<usize> {
    let n = points.len();
    let all = || (0..n).collect::<Vec<_>>();
    if n < 4 {
        return all();
    }
    let scale = points.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let eps = 1e-12 * scale * scale * scale;
    let Some(tet) = initial_tetrahedron(points, eps) else {
        return all();
    };

    let above = |f: &[usize; 3], p: usize| orient(points[f[0]], points[f[1]], points[f[2]], points[p]);
    let inside: Point = core::array::from_fn(|k| tet.iter().map(|&i| points[i][k]).sum::<f64>() / 4.0);
    let mut faces: Vec<Face> = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]
        .iter()
        .map(|t| {
            let (a, b, c) = (tet[t[0]], tet[t[1]], tet[t[2]]);
            let v = if orient(points[a], points[b], points[c], inside) > 0.0 { [a, c, b] } else { [a, b, c] };
            Face { v, alive: true, outside: Vec::new() }
        })
        .collect();
    let assign = |faces: &mut [Face], candidates: &[usize], p: usize| {
        if let Some(f) = candidates.iter().copied().find(|&f| above(&faces[f].v, p) > eps) {
            faces[f].outside.push(p);
        }
    };
    for p in 0..n {
        if !tet.contains(&p) {
            assign(&mut faces, &[0, 1, 2, 3], p);
        }
    }

    let mut edge_face: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (id, f) in faces.iter().enumerate() {
        for e in 0..3 {
            edge_face.insert((f.v[e], f.v[(e + 1) % 3]), id);
        }
    }
    let mut pending: Vec<usize> = (0..4).filter(|&f| !faces[f].outside.is_empty()).collect();
    while let Some(fi) = pending.pop() {
        if !faces[fi].alive || faces[fi].outside.is_empty() {
            continue;
        }
        let f = faces[fi].v;
        let p = *faces[fi]
            .outside
            .iter()
            .max_by(|&&a, &&b| above(&f, a).total_cmp(&above(&f, b)).then(b.cmp(&a)))
            .unwrap();
        // The faces visible from an outside point form a connected patch
        // around `fi`; walk it through shared edges.
        let mut visible = alloc::vec![fi];
        faces[fi].alive = false;
        let mut at = 0;
        while at < visible.len() {
            let v = faces[visible[at]].v;
            at += 1;
            for e in 0..3 {
                if let Some(&g) = edge_face.get(&(v[(e + 1) % 3], v[e])) {
                    if faces[g].alive && above(&faces[g].v, p) > eps {
                        faces[g].alive = false;
                        visible.push(g);
                    }
                }
            }
        }
        let mut edges = BTreeSet::new();
        let mut orphans = Vec::new();
        for &i in &visible {
            let v = faces[i].v;
            for e in 0..3 {
                edges.insert((v[e], v[(e + 1) % 3]));
                edge_face.remove(&(v[e], v[(e + 1) % 3]));
            }
            orphans.append(&mut faces[i].outside);
        }
        let first_new = faces.len();
        for &(a, b) in &edges {
            if !edges.contains(&(b, a)) {
                let id = faces.len();
                faces.push(Face { v: [a, b, p], alive: true, outside: Vec::new() });
                for e in [(a, b), (b, p), (p, a)] {
                    edge_face.insert(e, id);
                }
            }
        }
        let new_faces: Vec<usize> = (first_new..faces.len()).collect();
        for q in orphans {
            if q != p {
                assign(&mut faces, &new_faces, q);
            }
        }
        pending.extend(new_faces.into_iter().filter(|&i| !faces[i].outside.is_empty()));
    }
    let mut out: Vec<usize> = faces.iter().filter(|f| f.alive).flat_map(|f| f.v).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Extreme x, farthest from it, farthest from the line, farthest from the
/// plane. `None` when the input is (nearly) coplanar.
fn initial_tetrahedron(points: &[Point], eps: f64) -> Option<[usize; 4]> {
    let n = points.len();
    let i0 = (0..n).min_by(|&a, &b| points[a][0].total_cmp(&points[b][0]))?;
    let i1 = (0..n).max_by(|&a, &b| dist2(points[a], points[i0]).total_cmp(&dist2(points[b], points[i0])))?;
    let line = sub(points[i1], points[i0]);
    let off_line = |i: usize| norm(cross(line, sub(points[i], points[i0])));
    let i2 = (0..n).max_by(|&a, &b| off_line(a).total_cmp(&off_line(b)))?;
    if off_line(i2) <= eps {
        return None;
    }
    let off_plane = |i: usize| orient(points[i0], points[i1], points[i2], points[i]).abs();
    let i3 = (0..n).max_by(|&a, &b| off_plane(a).total_cmp(&off_plane(b)))?;
    if off_plane(i3) <= eps {
        return None;
    }
    Some([i0, i1, i2, i3])
}
