#![allow(dead_code)]

use misgmm::model::DataSet;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Heteroskedastic linear IV data with rows `[y, x(p), z(m)]` and a direct
/// effect of the last instrument on the outcome.
pub fn linear_iv_data(seed: u64, n: usize, p: usize, m: usize, direct: f64) -> DataSet {
    let mut r = rng(seed);
    let pi: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..p).map(|k| if j % p == k { 1.0 } else { 0.3 * normal(&mut r) }).collect())
        .collect();
    let beta: Vec<f64> = (0..p).map(|_| normal(&mut r)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..m).map(|_| normal(&mut r)).collect();
            let e: f64 = normal(&mut r) * (1.0 + 0.5 * z[0].abs());
            let x: Vec<f64> = (0..p)
                .map(|k| (0..m).map(|j| pi[j][k] * z[j]).sum::<f64>() + 0.5 * e + normal(&mut r))
                .collect();
            let y = x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + direct * z[m - 1] + e;
            let mut row = vec![y];
            row.extend(&x);
            row.extend(&z);
            row
        })
        .collect();
    DataSet::from_rows(&rows).unwrap()
}

/// Rows `[y, x(p), z(m)]` for the exponential moment model `z (y − exp(x'θ))`.
pub fn exp_iv_data(seed: u64, n: usize, p: usize, m: usize) -> DataSet {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..m).map(|_| normal(&mut r)).collect();
            let x: Vec<f64> = (0..p).map(|k| 0.4 * z[k % m] + 0.3 * normal(&mut r)).collect();
            let idx: f64 = x.iter().map(|v| 0.3 * v).sum();
            let y = idx.exp() * (1.0 + 0.2 * normal(&mut r)) + 0.1 * z[m - 1];
            let mut row = vec![y];
            row.extend(&x);
            row.extend(&z);
            row
        })
        .collect();
    DataSet::from_rows(&rows).unwrap()
}

/// Random symmetric positive definite matrix.
pub fn random_spd(seed: u64, m: usize) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(m, m, |_, _| normal(&mut r));
    &a * a.transpose() + DMatrix::identity(m, m) * 0.5
}
