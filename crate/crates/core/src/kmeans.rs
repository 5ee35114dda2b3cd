//! Seeded k-means++ / Lloyd clustering over row-major vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sq_dist<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k×dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<u32>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Nearest row of `centroids` to `x`; ties go to the lower index.
pub fn nearest<T: Copy + Into<f64>>(x: &[T], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
pub fn kmeans_pp_init<T: Copy + Into<f64>>(
    data: &[T],
    dim: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = data.len() / dim;
    assert!(k >= 1 && k <= n, "need 1 <= k <= n");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(row(first).iter().map(|&v| v.into()));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(row(pick).iter().map(|&v| v.into()));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centroids[start..]));
        }
    }
    centroids
}

/// Lloyd iterations from a k-means++ start. Empty clusters are re-seeded from
/// the point farthest from its current centroid.
pub fn kmeans<T: Copy + Into<f64>>(
    data: &[T],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> KMeans {
    let n = data.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(data, dim, k, &mut rng);
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut assignments = vec![0u32; n];
    let mut dists = vec![0f64; n];

    let assign = |centroids: &[f64], assignments: &mut [u32], dists: &mut [f64]| {
        for i in 0..n {
            let (c, d) = nearest(row(i), centroids, dim);
            assignments[i] = c as u32;
            dists[i] = d;
        }
    };

    for _ in 0..iters {
        assign(&centroids, &mut assignments, &mut dists);
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v.into();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("non-empty data");
                for j in 0..dim {
                    centroids[c * dim + j] = row(far)[j].into();
                }
                dists[far] = 0.0;
                assignments[far] = c as u32;
            }
        }
    }
    assign(&centroids, &mut assignments, &mut dists);
    KMeans {
        dim,
        centroids,
        assignments,
    }
}
