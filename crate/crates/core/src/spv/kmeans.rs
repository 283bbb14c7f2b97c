//! Lloyd's k-means with k-means++ seeding.

use rand::Rng as _;

use super::SpvError;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_trace: Vec<f64>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        self.sse_trace.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut sse = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (j, d) = nearest(p, centroids);
            sse += d;
            j
        })
        .collect();
    (labels, sse)
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult, SpvError> {
    if k == 0 || k > points.len() {
        return Err(SpvError::OutOfRange {
            what: "k",
            value: k,
            min: 1,
            max: points.len(),
        });
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(SpvError::DimMismatch {
            expected: dim,
            got: bad.len(),
            context: "k-means point".into(),
        });
    }

    let mut rng = rng::seeded(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let (mut labels, sse) = assign(points, &centroids);
    let mut sse_trace = vec![sse];
    let mut converged = false;

    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // Empty clusters restart at the point farthest from its centroid.
        let mut taken = vec![false; points.len()];
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = points
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, p)| (i, sq_dist(p, &centroids[labels[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                taken[i] = true;
                centroids[j] = points[i].clone();
            }
        }

        let (next, sse) = assign(points, &centroids);
        sse_trace.push(sse);
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
    }

    Ok(KMeansResult {
        assignments: labels,
        centroids,
        sse_trace,
        converged,
    })
}
