//! K-means and clustering evaluation: accuracy under optimal cluster-to-class
//! matching, normalized mutual information (arithmetic-mean normalization)
//! and purity.

use std::collections::BTreeMap;

use gdcn_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("k = {k} but only {n} points")]
    TooFewPoints { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("prediction has {pred} entries, truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("labelings are empty")]
    Empty,
}

type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Distance-weighted seeding: the first centroid uniformly, each next one
/// with probability proportional to squared distance from the chosen set.
fn plus_plus_init(points: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Lloyd iterations from `init` until the assignment stops changing or
/// `max_iter` assignment steps have run. A cluster that loses all its points
/// keeps its previous centroid.
pub fn lloyd(points: &Tensor, init: Tensor, max_iter: usize) -> ClusteringResult {
    let (n, dim) = (points.rows(), points.cols());
    let k = init.rows();
    let mut centroids = init;
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, slot) in assignments.iter_mut().enumerate() {
            let (c, d) = nearest(points.row(i), &centroids);
            if *slot != c {
                *slot = c;
                changed = true;
            }
            inertia += d;
        }
        trace.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(points.row(i))
                .for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids
                    .row_mut(c)
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                    .for_each(|(m, s)| *m = s * inv);
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points.row(i), centroids.row(assignments[i]))).sum();
    ClusteringResult {
        assignments,
        centroids,
        inertia,
        inertia_trace: trace,
    }
}

/// Best-inertia result over `restarts` seeded runs (at least one).
pub fn kmeans(points: &Tensor, k: usize, restarts: usize, seed: u64) -> Result<ClusteringResult> {
    if k == 0 {
        return Err(MetricsError::ZeroClusters);
    }
    let n = points.rows();
    if k > n {
        return Err(MetricsError::TooFewPoints { k, n });
    }
    let mut best: Option<ClusteringResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = seed::rng(seed::derive(seed, &[r as u64]));
        let init = plus_plus_init(points, k, &mut rng);
        let result = lloyd(points, init, MAX_LLOYD_ITERATIONS);
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Contingency counts `table[p][t]` over compacted label ids.
fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let compact = |labels: &[usize]| -> (Vec<usize>, usize) {
        let mut ids = BTreeMap::new();
        for &l in labels {
            let next = ids.len();
            ids.entry(l).or_insert(next);
        }
        (labels.iter().map(|l| ids[l]).collect(), ids.len())
    };
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let mut table = vec![vec![0u64; kt]; kp];
    for (&a, &b) in p.iter().zip(&t) {
        table[a][b] += 1;
    }
    Ok(table)
}

/// Minimum-cost perfect matching on a square matrix (Kuhn–Munkres with
/// potentials). Returns `assign[row] = col`.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1]; // column -> row (1-based), 0 = free
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = INF;
            let mut col1 = 0;
            for c in 1..=n {
                if !used[c] {
                    let cur = cost[r - 1][c - 1] - u[r] - v[c];
                    if cur < minv[c] {
                        minv[c] = cur;
                        way[c] = col0;
                    }
                    if minv[c] < delta {
                        delta = minv[c];
                        col1 = c;
                    }
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for c in 1..=n {
        if owner[c] > 0 {
            assign[owner[c] - 1] = c - 1;
        }
    }
    assign
}

/// Fraction of samples matched under the best one-to-one mapping of
/// predicted clusters onto classes.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let size = table.len().max(table[0].len());
    let max_count = table.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|p| {
            (0..size)
                .map(|t| max_count - table.get(p).and_then(|r| r.get(t)).copied().unwrap_or(0) as i64)
                .collect()
        })
        .collect();
    let assign = hungarian(&cost);
    let matched: u64 = assign
        .iter()
        .enumerate()
        .map(|(p, &t)| table.get(p).and_then(|r| r.get(t)).copied().unwrap_or(0))
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(pred; truth) / ((H(pred) + H(truth)) / 2)`. Two single-cluster
/// partitions score 1; exactly one single-cluster partition scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let (kp, kt) = (table.len(), table[0].len());
    match (kp == 1, kt == 1) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let n = pred.len() as f64;
    let row: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..kt).map(|t| table.iter().map(|r| r[t]).sum()).collect();
    let mut mi = 0.0;
    for p in 0..kp {
        for t in 0..kt {
            let c = table[p][t];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row[p] as f64 * col[t] as f64)).ln();
            }
        }
    }
    let h = (entropy(row.into_iter(), n) + entropy(col.into_iter(), n)) / 2.0;
    Ok((mi / h).clamp(0.0, 1.0))
}

/// `(1/N) Σ_clusters max_class |cluster ∩ class|`.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let majority: u64 = table.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub pur: f64,
}

impl MetricsReport {
    pub fn compute(pred: &[usize], truth: &[usize]) -> Result<Self> {
        Ok(Self {
            acc: accuracy(pred, truth)?,
            nmi: nmi(pred, truth)?,
            pur: purity(pred, truth)?,
        })
    }

    /// `{"acc": …, "nmi": …, "pur": …}` with six decimals.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"acc\": {:.6}, \"nmi\": {:.6}, \"pur\": {:.6}}}",
            self.acc, self.nmi, self.pur
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_reference_cases() {
        assert_eq!(accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[2, 0, 1, 0], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(matches!(
            accuracy(&[0, 1], &[0]),
            Err(MetricsError::LengthMismatch { pred: 2, truth: 1 })
        ));
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn nmi_reference_cases() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[1, 1, 0, 0, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn purity_reference_cases() {
        assert_eq!(purity(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(purity(&[0; 6], &[0, 0, 1, 1, 2, 2]).unwrap(), 1.0 / 3.0);
        assert_eq!(purity(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn kmeans_exact_locations() {
        let pts = Tensor::from_rows(&[[0.0, 0.0], [5.0, 5.0], [0.0, 0.0], [-3.0, 2.0], [5.0, 5.0], [-3.0, 2.0]])
            .unwrap();
        let r = kmeans(&pts, 3, 10, 4).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(accuracy(&r.assignments, &[0, 1, 0, 2, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let pts = Tensor::from_rows(&[[1.0, 2.0], [3.0, 0.0], [2.0, 7.0]]).unwrap();
        let r = kmeans(&pts, 1, 3, 0).unwrap();
        assert!((r.centroids.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((r.centroids.get(0, 1) - 3.0).abs() < 1e-12);
        // per-coordinate variance sums: x: 2/3, y: 26/3, times N = 3
        assert!((r.inertia - 28.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_errors() {
        let pts = Tensor::zeros(&[2, 1]);
        assert_eq!(kmeans(&pts, 3, 1, 0), Err(MetricsError::TooFewPoints { k: 3, n: 2 }));
        assert_eq!(kmeans(&pts, 0, 1, 0), Err(MetricsError::ZeroClusters));
    }

    #[test]
    fn report_json_has_six_decimals() {
        let r = MetricsReport {
            acc: 0.98,
            nmi: 0.944,
            pur: 1.0,
        };
        assert_eq!(r.to_json(), "{\"acc\": 0.980000, \"nmi\": 0.944000, \"pur\": 1.000000}");
    }
}
