use log::warn;
use rand::Rng as _;

use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the smallest index.
pub fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| (x + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        d2.iter_mut()
            .zip(points)
            .for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> KMeansResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, _) = nearest(p, &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s / n).collect();
            }
        }
        // empty clusters take the point farthest from its own centroid
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| !taken[i] && counts[assignments[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centroids[assignments[a]]);
                    let db = sq_dist(&points[b], &centroids[assignments[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                });
            if let Some(i) = far {
                taken[i] = true;
                counts[assignments[i]] -= 1;
                counts[j] = 1;
                assignments[i] = j;
                centroids[j] = points[i].clone();
            }
        }
    }
    let mut inertia = 0.0;
    for (a, p) in assignments.iter_mut().zip(points) {
        let (j, d) = nearest(p, &centroids);
        *a = j;
        inertia += d;
    }
    KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
    }
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// With fewer distinct points than `k`, clustering runs on the distinct
/// count and the codebook is padded with jittered copies of its centroids.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut Rng) -> KMeansResult {
    assert!(!points.is_empty(), "k-means needs at least one point");
    assert!(k > 0, "k must be positive");
    let distinct = distinct_count(points);
    let k_eff = k.min(distinct);
    if k_eff < k {
        warn!("only {distinct} distinct points for {k} centroids; padding with perturbed copies");
    }
    let seeds = plus_plus(points, k_eff, rng);
    let mut result = lloyd(points, seeds, max_iters.max(1));
    if k_eff < k {
        let dim = points[0].len();
        let spread = {
            let mean: Vec<f64> = (0..dim)
                .map(|i| points.iter().map(|p| p[i]).sum::<f64>() / points.len() as f64)
                .collect();
            (points.iter().map(|p| sq_dist(p, &mean)).sum::<f64>() / (points.len() * dim) as f64)
                .sqrt()
        };
        let scale = if spread > 0.0 { 1e-3 * spread } else { 1e-6 };
        for i in 0..k - k_eff {
            let base = result.centroids[i % k_eff].clone();
            let jittered = base.iter().map(|x| x + scale * rng::normal(rng)).collect();
            result.centroids.push(jittered);
        }
    }
    result
}
