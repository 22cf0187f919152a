//! Lloyd k-means with k-means++ seeding. The assignment step is delegated to
//! an [`Executor`] so splits of accelerator-resident clusters run there.

use rand::Rng;

use crate::tiering::{Executor, ExecutorError};
use crate::vector::{deviation, Metric, Vector};

#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub centroids: Vec<Vec<f32>>,
    /// Group index per input point.
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn mean_of(points: &[Vector], idx: impl Iterator<Item = usize>, dim: usize) -> Option<Vec<f32>> {
    let mut sum = vec![0.0f64; dim];
    let mut n = 0usize;
    for i in idx {
        for (s, x) in sum.iter_mut().zip(points[i].iter()) {
            *s += f64::from(*x);
        }
        n += 1;
    }
    (n > 0).then(|| sum.into_iter().map(|s| (s / n as f64) as f32).collect())
}

/// Partitions `points` into exactly `k` non-empty groups (requires
/// `points.len() >= k`). Stops after `max_iters` rounds or when no centroid
/// moves more than `1e-4 * δ`, δ being the input's deviation about its mean.
pub fn kmeans<R: Rng>(
    points: &[Vector],
    k: usize,
    max_iters: usize,
    metric: Metric,
    rng: &mut R,
    executor: &dyn Executor,
) -> Result<KMeansOutcome, ExecutorError> {
    assert!(k >= 1 && points.len() >= k, "kmeans needs at least k points");
    let dim = points[0].len();
    let mean = mean_of(points, 0..points.len(), dim).expect("non-empty");
    let delta = deviation(points, &mean, metric).unwrap_or(0.0);
    let tol = 1e-4 * delta;

    let mut centroids = seed_plus_plus(points, k, metric, rng);
    // Duplicate seeds would leave a group empty forever; nudge them apart.
    let jitter = 1e-6 * delta.max(f32::MIN_POSITIVE);
    for i in 1..centroids.len() {
        for _ in 0..4 {
            if !centroids[..i].iter().any(|c| *c == centroids[i]) {
                break;
            }
            for x in centroids[i].iter_mut() {
                *x += rng.random_range(-1.0f32..=1.0) * jitter;
            }
        }
    }

    let mut assignment = executor.assign(points, &centroids, metric)?;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut moved = 0.0f32;
        for (g, c) in centroids.iter_mut().enumerate() {
            let members = assignment.iter().enumerate().filter(|(_, a)| **a == g).map(|(i, _)| i);
            if let Some(next) = mean_of(points, members, dim) {
                moved = moved.max(metric.length(c, &next));
                *c = next;
            }
        }
        assignment = executor.assign(points, &centroids, metric)?;
        if moved <= tol {
            break;
        }
    }

    fill_empty_groups(points, &centroids, &mut assignment, k, metric);
    for (g, c) in centroids.iter_mut().enumerate() {
        let members = assignment.iter().enumerate().filter(|(_, a)| **a == g).map(|(i, _)| i);
        if let Some(next) = mean_of(points, members, dim) {
            *c = next;
        }
    }
    Ok(KMeansOutcome {
        centroids,
        assignment,
        iterations,
    })
}

fn seed_plus_plus<R: Rng>(points: &[Vector], k: usize, metric: Metric, rng: &mut R) -> Vec<Vec<f32>> {
    let mut centroids = Vec::with_capacity(k);
    let first = rng.random_range(0..points.len());
    centroids.push(points[first].to_vec());
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| f64::from(metric.distance(p, &centroids[0]).max(0.0)))
        .collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in nearest.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].to_vec());
        let c = centroids.last().expect("just pushed");
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(f64::from(metric.distance(p, c).max(0.0)));
        }
    }
    centroids
}

/// Moves the farthest points of the largest groups into empty groups so all
/// `k` groups are non-empty.
fn fill_empty_groups(
    points: &[Vector],
    centroids: &[Vec<f32>],
    assignment: &mut [usize],
    k: usize,
    metric: Metric,
) {
    loop {
        let mut counts = vec![0usize; k];
        for a in assignment.iter() {
            counts[*a] += 1;
        }
        let Some(empty) = counts.iter().position(|c| *c == 0) else {
            return;
        };
        let largest = (0..k)
            .max_by(|a, b| counts[*a].cmp(&counts[*b]).then(b.cmp(a)))
            .expect("k >= 1");
        if counts[largest] < 2 {
            return;
        }
        let donor = assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == largest)
            .map(|(i, _)| (metric.distance(&points[i], &centroids[largest]), i))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i)
            .expect("largest group is non-empty");
        assignment[donor] = empty;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiering::HostExecutor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn identical_points_still_partition() {
        let pts: Vec<Vector> = (0..10).map(|_| Arc::from(&[1.0f32, 1.0][..])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = kmeans(&pts, 3, 10, Metric::SquaredEuclidean, &mut rng, &HostExecutor::default()).unwrap();
        for g in 0..3 {
            assert!(out.assignment.iter().any(|a| *a == g));
        }
        assert_eq!(out.assignment.len(), 10);
    }

    #[test]
    fn separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts: Vec<Vector> = Vec::new();
        for i in 0..200 {
            let base = if i < 100 { -5.0 } else { 5.0 };
            let v: Vec<f32> = (0..4).map(|_| base + rng.random_range(-0.5f32..0.5)).collect();
            pts.push(Arc::from(v));
        }
        let out = kmeans(&pts, 2, 10, Metric::SquaredEuclidean, &mut rng, &HostExecutor::default()).unwrap();
        let first = out.assignment[0];
        assert!(out.assignment[..100].iter().all(|a| *a == first));
        assert!(out.assignment[100..].iter().all(|a| *a != first));
    }
}
