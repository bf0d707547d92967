#![allow(dead_code)]

// Naive nested-Vec reimplementations used as independent oracles.

pub mod decoder;
pub mod fusion;
pub mod gesa;
pub mod metrics;
pub mod policy;

use gevst::params::{ParamId, ParamStore};
use gevst::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn to_m(t: &Tensor) -> M {
    assert_eq!(t.shape().len(), 2, "oracle needs a matrix");
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn param(store: &ParamStore, id: ParamId) -> M {
    let t = store.get(id);
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        to_m(t)
    }
}

pub fn vec_of(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                assert_eq!(a[i].len(), k);
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

pub fn add_bias(a: &M, b: &[f64]) -> M {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(a: &M) -> M {
    a.iter().map(|r| softmax_vec(r)).collect()
}

pub fn relu(a: &M) -> M {
    a.iter()
        .map(|r| r.iter().map(|v| v.max(0.0)).collect())
        .collect()
}

pub fn layer_norm(a: &M, gain: &[f64], bias: &[f64], eps: f64) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * gain[i] + bias[i])
                .collect()
        })
        .collect()
}

/// Columns `h·dh .. (h+1)·dh`.
pub fn head_cols(a: &M, h: usize, dh: usize) -> M {
    a.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect()
}

/// `softmax(q·kᵀ/√dh)` for one head.
pub fn attention(q: &M, k: &M) -> M {
    let dh = q[0].len() as f64;
    let s = mm(q, &transpose(k));
    softmax_rows(
        &s.iter()
            .map(|r| r.iter().map(|v| v / dh.sqrt()).collect())
            .collect(),
    )
}

pub fn max_diff(a: &M, t: &Tensor) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().cloned().collect();
    assert_eq!(flat.len(), t.len(), "oracle and tensor sizes differ");
    flat.iter()
        .zip(t.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn row_sums(t: &Tensor) -> Vec<f64> {
    let d = t.last_dim();
    t.data().chunks(d).map(|c| c.iter().sum()).collect()
}

/// Random weights for a linear readout, so that a loss does not vanish
/// through layer-norm.
pub fn readout(seed: u64, shape: &[usize]) -> Tensor {
    uniform(&mut rng(seed), shape)
}
