//! Independent oracles for the integration and acceptance tests. Nothing here
//! calls the code paths it is used to check.
#![allow(dead_code)]

use ctxsim::dataset::ContextTriplet;
use ctxsim::model::{init_params_with, ContextMatrix, ModelOptions, ModelParams};
use ctxsim::training::Objective;
use ctxsim::EmbeddingStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub params: ModelParams,
    pub store: EmbeddingStore,
    pub batch: Vec<ContextTriplet>,
}

/// Random parameters away from the identity and a batch over random embeddings.
pub fn random_instance(
    seed: u64,
    d: usize,
    r: usize,
    batch: usize,
    tau: f64,
    options: ModelOptions,
) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params_with(d, r, tau, seed, 0.4, options).unwrap();
    for w in params.w.iter_mut() {
        *w += rng.random_range(-0.3..0.3);
    }
    for b in params.b.iter_mut() {
        *b = rng.random_range(-0.3..0.3);
    }
    let n_images = 4 * batch;
    let rows: Vec<(u64, Vec<f64>)> = (0..n_images as u64)
        .map(|id| (id, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let store = EmbeddingStore::from_rows(d, rows).unwrap();
    let batch = (0..batch)
        .map(|i| {
            let base = 4 * i as u64;
            ContextTriplet {
                context_id: base + 3,
                image_ids: [base, base + 1, base + 2],
                oddball_index: rng.random_range(0..3),
                source_trial_id: i as u64,
                participant_id: 0,
                split: None,
            }
        })
        .collect();
    Instance {
        params,
        store,
        batch,
    }
}

/// Central finite differences of the objective, one block per parameter
/// group (`W, b, M, m0`).
pub fn fd_gradient(
    objective: &Objective,
    params: &ModelParams,
    batch: &[ContextTriplet],
    store: &EmbeddingStore,
    h: f64,
) -> [Vec<f64>; 4] {
    let loss = |p: &ModelParams| objective.loss(p, batch, store).unwrap().total;
    let mut out: [Vec<f64>; 4] = Default::default();
    for block in 0..4 {
        let len = params.blocks()[block].len();
        out[block] = (0..len)
            .map(|i| {
                let mut plus = params.clone();
                plus.blocks_mut()[block][i] += h;
                let mut minus = params.clone();
                minus.blocks_mut()[block][i] -= h;
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            })
            .collect();
    }
    out
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps components that are
/// zero in both from dividing roundoff by roundoff.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `A = BᵀB` as an explicit `d × d` matrix.
pub fn explicit_a(b: &ContextMatrix) -> Vec<Vec<f64>> {
    let (r, d) = (b.rows, b.cols);
    let mut a = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..r {
                a[i][j] += b.data[k * d + i] * b.data[k * d + j];
            }
        }
    }
    a
}

pub fn explicit_similarity(b: &ContextMatrix, u: &[f64], v: &[f64]) -> f64 {
    let a = explicit_a(b);
    let mut s = 0.0;
    for i in 0..u.len() {
        for j in 0..v.len() {
            s += u[i] * a[i][j] * v[j];
        }
    }
    s
}

/// `‖BᵀB − I‖_F²` with the `d × d` matrix formed explicitly.
pub fn explicit_identity_deviation(b: &ContextMatrix) -> f64 {
    let a = explicit_a(b);
    let mut s = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let e = if i == j { v - 1.0 } else { *v };
            s += e * e;
        }
    }
    s
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// eigenvalues and eigenvectors (as columns of `v`) sorted by eigenvalue,
/// largest first.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n)
        .map(|row| order.iter().map(|&i| v[row][i]).collect())
        .collect();
    (values, vectors)
}

/// Squared reconstruction error of centered data from its top-`k` principal
/// subspace, via the Jacobi oracle.
pub fn reconstruction_error_oracle(data: &[Vec<f64>], k: usize) -> f64 {
    let n = data.len();
    let m = data[0].len();
    let mean: Vec<f64> = (0..m)
        .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = data
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let mut cov = vec![vec![0.0; m]; m];
    for row in &centered {
        for i in 0..m {
            for j in 0..m {
                cov[i][j] += row[i] * row[j] / (n - 1) as f64;
            }
        }
    }
    let (_, vecs) = jacobi_eigen(cov);
    let mut err = 0.0;
    for row in &centered {
        let mut recon = vec![0.0; m];
        for c in 0..k {
            let score: f64 = (0..m).map(|j| row[j] * vecs[j][c]).sum();
            for j in 0..m {
                recon[j] += score * vecs[j][c];
            }
        }
        err += row.iter().zip(&recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    err
}

/// Probabilities straight from `exp(s/τ) / Σ exp(s/τ)` without shifting.
pub fn direct_softmax(sims: [f64; 3], tau: f64) -> [f64; 3] {
    let e = sims.map(|s| (s / tau).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}
