//! Seeded k-means++ initialization followed by a fixed number of Lloyd
//! iterations, for the inverted-file partition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub(crate) fn nearest(v: &[f64], centroids: &[f64], dim: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, centroid) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(v, centroid);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Returns `(centroids, assignments)`; every vector is assigned to its
/// nearest final centroid.
pub(crate) fn kmeans(
    vectors: &[f64],
    dim: usize,
    k: usize,
    iterations: usize,
    seed: u64,
) -> (Vec<f64>, Vec<usize>) {
    let n = vectors.len() / dim;
    debug_assert!(k >= 1 && k <= n);
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // all remaining points coincide with a centroid
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(next)));
        }
    }
    let mut centroids: Vec<f64> = chosen.iter().flat_map(|&i| row(i).to_vec()).collect();

    let mut assign = vec![0; n];
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(row(i), &centroids, dim);
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    for (i, a) in assign.iter_mut().enumerate() {
        *a = nearest(row(i), &centroids, dim);
    }
    (centroids, assign)
}
