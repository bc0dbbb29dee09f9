//! Brute-force references used by the integration and acceptance tests.

#![allow(dead_code)]

use mganet_core::{BinaryMask, Geometry};
use rand::Rng;

/// A random mask of side at most `max_side` on an anisotropic grid with
/// at least one voxel of each class.
pub fn random_mask<R: Rng>(rng: &mut R, max_side: usize) -> BinaryMask {
    loop {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(2..=max_side));
        let spacing: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..2.5));
        let geom = Geometry::new(dims, spacing).unwrap();
        let fill = rng.random_range(0.05..0.95);
        let blobby = rng.random_bool(0.5);
        let centre: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.0..dims[a] as f64));
        let radius = rng.random_range(1.0..(max_side as f64));
        let data: Vec<u8> = (0..geom.len())
            .map(|i| {
                let c = geom.coords(i);
                let inside = if blobby {
                    let r2: f64 = (0..3).map(|a| ((c[a] as f64 - centre[a]) * spacing[a]).powi(2)).sum();
                    r2 <= radius * radius
                } else {
                    rng.random_bool(fill)
                };
                u8::from(inside)
            })
            .collect();
        let n = data.iter().filter(|v| **v == 1).count();
        if n > 0 && n < data.len() {
            return BinaryMask::new(geom, data).unwrap();
        }
    }
}

fn dist2(g: &Geometry, i: usize, j: usize) -> f64 {
    let (a, b, s) = (g.coords(i), g.coords(j), g.spacing());
    (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2)).sum()
}

/// Signed distance to the nearest voxel of the other class, positive inside.
pub fn brute_sdt(m: &BinaryMask) -> Vec<f64> {
    let g = m.geometry();
    let d = m.data();
    (0..g.len())
        .map(|i| {
            let best = (0..g.len())
                .filter(|&j| d[j] != d[i])
                .map(|j| dist2(g, i, j))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            if d[i] == 1 {
                best
            } else {
                -best
            }
        })
        .collect()
}

/// Dice, recall and accuracy from explicit voxel sets.
pub fn brute_overlap(pred: &BinaryMask, gt: &BinaryMask) -> (f64, f64, f64) {
    use std::collections::BTreeSet;
    let set = |m: &BinaryMask| -> BTreeSet<usize> { (0..m.data().len()).filter(|&i| m.data()[i] == 1).collect() };
    let (p, g) = (set(pred), set(gt));
    let inter = p.intersection(&g).count() as f64;
    let agree = (0..pred.data().len()).filter(|i| p.contains(i) == g.contains(i)).count() as f64;
    (
        2.0 * inter / (p.len() + g.len()) as f64,
        inter / g.len() as f64,
        agree / pred.data().len() as f64,
    )
}

/// Mask voxels with a face neighbour outside the mask or outside the grid.
pub fn brute_surface(m: &BinaryMask) -> Vec<usize> {
    let g = m.geometry();
    let dims = g.dims();
    (0..g.len())
        .filter(|&i| m.data()[i] == 1)
        .filter(|&i| {
            let c = g.coords(i);
            let offsets = [[-1i64, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
            offsets.iter().any(|o| {
                let n: Vec<i64> = (0..3).map(|a| c[a] as i64 + o[a]).collect();
                if (0..3).any(|a| n[a] < 0 || n[a] >= dims[a] as i64) {
                    return true;
                }
                !m.get(n[0] as usize, n[1] as usize, n[2] as usize)
            })
        })
        .collect()
}

/// Symmetric mean surface distance by comparing every pair of surface voxels.
pub fn brute_msd(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let g = a.geometry();
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    let directed = |from: &[usize], to: &[usize]| {
        from.iter()
            .map(|&i| to.iter().map(|&j| dist2(g, i, j)).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (directed(&sa, &sb) + directed(&sb, &sa))
}
