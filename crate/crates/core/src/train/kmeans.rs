//! Lloyd's K-means with k-means++ seeding, used to pick representative
//! fine-tuning samples from a kernel's graph representations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const MAX_ITERS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: the first center uniform, the rest proportional to
/// squared distance from the nearest chosen center.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass at the chosen centers: fall back to uniform
            rng.gen_range(0..points.len())
        } else {
            let mut draw = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if draw < w {
                    pick = i;
                    break;
                }
                draw -= w;
            }
            pick
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, centers.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centers
}

/// Cluster assignment for every point.
fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Runs Lloyd's algorithm and returns, per cluster, the medoid: the member
/// nearest to the final centroid. Output indices are sorted and distinct;
/// `k == points.len()` selects everything.
pub fn kmeans_medoids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k >= 1 && k <= points.len(), "k={k} for {} points", points.len());
    if k == points.len() {
        return (0..points.len()).collect();
    }
    let dim = points[0].len();
    let mut centers = seed_centers(points, k, rng);
    let mut assignment = assign(points, &centers);
    for _ in 0..MAX_ITERS {
        // recompute centroids
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its center
            }
            for s in sums[c].iter_mut() {
                *s /= counts[c] as f64;
            }
            shift += dist2(&sums[c], &centers[c]);
            centers[c] = std::mem::take(&mut sums[c]);
        }
        assignment = assign(points, &centers);
        if shift < TOLERANCE {
            break;
        }
    }

    // medoid per cluster; empty clusters are refilled with the globally
    // farthest unselected points so exactly k indices come back
    let mut medoids: Vec<Option<usize>> = vec![None; k];
    let mut best_d = vec![f64::INFINITY; k];
    for (i, (p, &a)) in points.iter().zip(&assignment).enumerate() {
        let d = dist2(p, &centers[a]);
        if d < best_d[a] {
            best_d[a] = d;
            medoids[a] = Some(i);
        }
    }
    let mut out: Vec<usize> = medoids.into_iter().flatten().collect();
    out.sort_unstable();
    out.dedup();
    let mut i = 0;
    while out.len() < k {
        if !out.contains(&i) {
            out.push(i);
        }
        i += 1;
    }
    out.sort_unstable();
    out
}
