//! K-means with k-means++ seeding over row-major point matrices.

use rand::Rng;

use crate::error::{Error, Result};

/// Lloyd iteration cap.
pub const MAX_ITERS: usize = 50;
/// Stop when the objective improves by less than this fraction.
pub const REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// `k * dim` centroid coordinates.
    pub centroids: Vec<f64>,
    pub assign: Vec<usize>,
    /// Objective after every assignment step, first entry from the seeding.
    pub history: Vec<f64>,
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn objective(&self) -> f64 {
        *self.history.last().expect("at least one assignment")
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assign {
            s[a] += 1;
        }
        s
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties to the lowest index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check(points: &[f64], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form rows of {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k={k} points, got {n}"
        )));
    }
    Ok(n)
}

/// k-means++ seeding: first centre uniform, later centres drawn with
/// probability proportional to squared distance to the nearest chosen centre.
pub fn plus_plus_init<R: Rng + ?Sized>(
    points: &[f64],
    dim: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = check(points, dim, k)?;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let first = rng.random_range(0..n);
    let mut centroids = row(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = Some(i);
                    break;
                }
                u -= w;
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend(c);
    }
    Ok(centroids)
}

fn assign_all(points: &[f64], dim: usize, centroids: &[f64], assign: &mut [usize]) -> f64 {
    let mut obj = 0.0;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let (c, d) = nearest(p, centroids, dim);
        assign[i] = c;
        obj += d;
    }
    obj
}

/// Lloyd iterations from given centroids. Empty clusters are moved onto the
/// point farthest from its centre among clusters with more than one member.
/// A final pass repeats that move until every centroid owns a point.
pub fn lloyd(points: &[f64], dim: usize, init: Vec<f64>) -> Result<KMeans> {
    let k = init.len() / dim;
    let n = check(points, dim, k)?;
    let mut centroids = init;
    let mut assign = vec![0; n];
    let mut history = vec![assign_all(points, dim, &centroids, &mut assign)];
    for _ in 0..MAX_ITERS {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in points.chunks_exact(dim).enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..(assign[i] + 1) * dim]
                .iter_mut()
                .zip(p)
            {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                if let Some(p) = farthest_in_shared(points, dim, &centroids, &assign, &counts) {
                    centroids[c * dim..(c + 1) * dim]
                        .copy_from_slice(&points[p * dim..(p + 1) * dim]);
                    counts[assign[p]] -= 1;
                    assign[p] = c;
                    counts[c] = 1;
                }
            }
        }
        let prev = *history.last().expect("seeded");
        let obj = assign_all(points, dim, &centroids, &mut assign);
        history.push(obj);
        if prev <= 0.0 || (prev - obj) / prev < REL_TOL {
            break;
        }
    }
    fill_empty(points, dim, &mut centroids, &mut assign, &mut history);
    Ok(KMeans {
        k,
        dim,
        centroids,
        assign,
        history,
    })
}

fn farthest_in_shared(
    points: &[f64],
    dim: usize,
    centroids: &[f64],
    assign: &[usize],
    counts: &[usize],
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let c = assign[i];
        if counts[c] < 2 {
            continue;
        }
        let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((i, d));
        }
    }
    best.filter(|&(_, d)| d > 0.0).map(|(i, _)| i)
}

fn fill_empty(
    points: &[f64],
    dim: usize,
    centroids: &mut [f64],
    assign: &mut [usize],
    history: &mut Vec<f64>,
) {
    let k = centroids.len() / dim;
    for _ in 0..4 * k {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let Some(p) = farthest_in_shared(points, dim, centroids, assign, &counts) else {
            return;
        };
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(&points[p * dim..(p + 1) * dim]);
        let obj = assign_all(points, dim, centroids, assign);
        history.push(obj);
    }
}

/// Seeded k-means++ followed by [`lloyd`].
pub fn kmeans<R: Rng + ?Sized>(
    points: &[f64],
    dim: usize,
    k: usize,
    rng: &mut R,
) -> Result<KMeans> {
    let init = plus_plus_init(points, dim, k, rng)?;
    lloyd(points, dim, init)
}
