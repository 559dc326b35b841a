//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the crate's loss or metric code.
#![allow(dead_code)]

use gdcn_core::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum of squared differences over every element of every view.
pub fn reconstruction_oracle(x: &[Vec<Vec<f64>>], xh: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for (view, rec) in x.iter().zip(xh) {
        for (row, rrow) in view.iter().zip(rec) {
            for (a, b) in row.iter().zip(rrow) {
                total += (a - b) * (a - b);
            }
        }
    }
    total
}

/// Similarity written out: `(1 + cos)/2` off the diagonal, zero on it.
pub fn similarity_oracle(fused: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = fused.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s[i][j] = 0.5 * (1.0 + cosine(&fused[i], &fused[j]));
            }
        }
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Element-by-element transcription of the structure-weighted loss.
pub fn contrastive_oracle(fused: &[Vec<f64>], views: &[Vec<Vec<f64>>], s: &[Vec<f64>], tau: f64) -> f64 {
    let n = fused.len();
    let mut acc = 0.0;
    for i in 0..n {
        for view in views {
            let numerator = (cosine(&fused[i], &view[i]) / tau).exp();
            let mut sum = 0.0;
            for j in 0..n {
                sum += ((1.0 - s[i][j]) * cosine(&fused[i], &view[j]) / tau).exp();
            }
            let denominator = (sum - (1.0 / tau).exp()).max(1e-12);
            acc += (numerator / denominator).ln();
        }
    }
    -acc / (2.0 * n as f64)
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Every permutation of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                go(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Best matched fraction over every injective relabeling of the predicted
/// clusters onto a label space large enough to hold both partitions.
pub fn accuracy_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().unwrap() + 1;
    let mut best = 0;
    for perm in permutations(k) {
        let hits = pred.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count();
        best = best.max(hits);
    }
    best as f64 / pred.len() as f64
}

fn entropy(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let k = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0.0; k];
    labels.iter().for_each(|&l| counts[l] += 1.0);
    counts.iter().filter(|&&c| c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
}

/// Mutual information over arithmetic-mean entropy, with the single-cluster
/// conventions: both constant gives 1, exactly one constant gives 0.
pub fn nmi_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let (hp, ht) = (entropy(pred), entropy(truth));
    if hp == 0.0 && ht == 0.0 {
        return 1.0;
    }
    if hp == 0.0 || ht == 0.0 {
        return 0.0;
    }
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0.0; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        joint[p][t] += 1.0;
    }
    let mut mi = 0.0;
    for p in 0..kp {
        let np: f64 = joint[p].iter().sum();
        for t in 0..kt {
            let nt: f64 = joint.iter().map(|r| r[t]).sum();
            let c = joint[p][t];
            if c > 0.0 {
                mi += (c / n) * ((c * n) / (np * nt)).ln();
            }
        }
    }
    mi / ((hp + ht) / 2.0)
}

pub fn purity_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let mut total = 0;
    for c in 0..=*pred.iter().max().unwrap() {
        let members: Vec<usize> = pred.iter().zip(truth).filter(|(p, _)| **p == c).map(|(_, t)| *t).collect();
        let best = (0..=*truth.iter().max().unwrap())
            .map(|t| members.iter().filter(|&&m| m == t).count())
            .max()
            .unwrap_or(0);
        total += best;
    }
    total as f64 / pred.len() as f64
}

/// Random `(pred, truth)` pair with at most `k` labels and `n` samples.
pub fn random_partition_pair(rng: &mut impl Rng, max_k: usize, max_n: usize) -> (Vec<usize>, Vec<usize>) {
    let k = rng.random_range(1..=max_k);
    let n = rng.random_range(1..=max_n);
    let pred = (0..n).map(|_| rng.random_range(0..k)).collect();
    let truth = (0..n).map(|_| rng.random_range(0..k)).collect();
    (pred, truth)
}
