//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use degaa::numcore::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn points(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Textbook LOF: sort every distance list, take the k-th, keep every point
/// within it, then average reachability distances and density ratios.
pub fn naive_lof(points: &[Vec<f64>], k: usize, eps: f64) -> Vec<f64> {
    let n = points.len();
    let kdist = |p: usize| {
        let mut ds: Vec<f64> = (0..n).filter(|&o| o != p).map(|o| dist(&points[p], &points[o])).collect();
        ds.sort_by(f64::total_cmp);
        ds[k - 1]
    };
    let hood = |p: usize| -> Vec<usize> {
        let kd = kdist(p);
        (0..n).filter(|&o| o != p && dist(&points[p], &points[o]) <= kd).collect()
    };
    let lrd = |p: usize| {
        let nb = hood(p);
        let mut total = 0.0;
        for &o in &nb {
            total += kdist(o).max(dist(&points[p], &points[o]));
        }
        1.0 / (total / nb.len() as f64).max(eps)
    };
    let lrds: Vec<f64> = (0..n).map(lrd).collect();
    (0..n)
        .map(|p| {
            let nb = hood(p);
            let mut total = 0.0;
            for &o in &nb {
                total += lrds[o] / lrds[p];
            }
            total / nb.len() as f64
        })
        .collect()
}

/// Index of the nearest centroid by exhaustive comparison, lowest id on ties.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in centroids.iter().enumerate() {
        let d: f64 = point.iter().zip(m).map(|(x, y)| (x - y) * (x - y)).sum();
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}
