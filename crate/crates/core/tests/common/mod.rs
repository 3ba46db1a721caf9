//! Brute-force reference implementations shared by the integration tests.
//! These loop over indices directly and never touch the tape.

#![allow(dead_code)]

use fedalign::numerics::Tensor;
use rand::Rng;

pub const FLOOR: f64 = 1e-12;

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let [b, d] = t.shape() else {
        panic!("expected a matrix")
    };
    (0..*b)
        .map(|i| t.data()[i * d..(i + 1) * d].to_vec())
        .collect()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Anchors are rows of `view`, candidates are every row of `reference`,
/// positives are rows `p ≠ i` with the same label.
pub fn supcon(view: &Tensor, reference: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let a: Vec<Vec<f64>> = rows(view).iter().map(|r| normalize(r)).collect();
    let r: Vec<Vec<f64>> = rows(reference).iter().map(|r| normalize(r)).collect();
    let b = a.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b)
            .map(|j| a[i].iter().zip(&r[j]).map(|(x, y)| x * y).sum::<f64>() / tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let pos: Vec<usize> = (0..b)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        total += -pos.iter().map(|&p| logits[p] - lse).sum::<f64>() / pos.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

pub fn consistency(z: &Tensor, views: &[&Tensor]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for v in views {
        for (a, b) in z.data().iter().zip(v.data()) {
            s += (a - b) * (a - b);
            n += 1;
        }
    }
    s / n as f64
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else {
                a * (a.max(FLOOR) / b.max(FLOOR)).ln()
            }
        })
        .sum()
}

pub fn js3(y: &Tensor, y1: &Tensor, y2: &Tensor) -> f64 {
    let (r0, r1, r2) = (rows(y), rows(y1), rows(y2));
    let mut total = 0.0;
    for i in 0..r0.len() {
        let m: Vec<f64> = (0..r0[i].len())
            .map(|c| (r0[i][c] + r1[i][c] + r2[i][c]) / 3.0)
            .collect();
        total += (kl(&r0[i], &m) + kl(&r1[i], &m) + kl(&r2[i], &m)) / 3.0;
    }
    total / r0.len() as f64
}

pub fn cross_entropy(y: &Tensor, labels: &[usize]) -> f64 {
    let r = rows(y);
    r.iter()
        .zip(labels)
        .map(|(row, &l)| -row[l].max(FLOOR).ln())
        .sum::<f64>()
        / r.len() as f64
}

pub fn random_matrix<R: Rng>(b: usize, d: usize, rng: &mut R) -> Tensor {
    let data = (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![b, d], data).unwrap()
}

/// Row-stochastic matrix with occasional exact zeros.
pub fn random_simplex<R: Rng>(b: usize, k: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(b * k);
    for _ in 0..b {
        let mut row: Vec<f64> = (0..k)
            .map(|_| {
                if rng.random::<f64>() < 0.1 {
                    0.0
                } else {
                    rng.random_range(0.01..1.0)
                }
            })
            .collect();
        if row.iter().all(|&v| v == 0.0) {
            row[0] = 1.0;
        }
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![b, k], data).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
