#![allow(dead_code)]

use editedid::predictor::{GaussianOracle, GaussianOracleConfig};
use editedid::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Oracle with `N(0,1)` means, variances `(scale·U(0.5,1.5))²`, the given
/// coupling, and one sample drawn from it at `e = 0`.
pub fn oracle_and_sample(seed: u64, d: usize, scale: f64, coupling: Vec<Vec<f64>>) -> (GaussianOracle, Vec<f64>) {
    let mut r = rng(seed);
    let mu = normals(&mut r, d);
    let var: Vec<f64> = (0..d).map(|_| (scale * r.gen_range(0.5..1.5)).powi(2)).collect();
    let noise = normals(&mut r, d);
    let x: Vec<f64> = (0..d).map(|j| mu[j] + var[j].sqrt() * noise[j]).collect();
    let cfg = GaussianOracleConfig { mu, sigma_diag: var, embedding_coupling: coupling };
    (GaussianOracle::new(cfg, NoiseSchedule::default()).unwrap(), x)
}

pub fn uncoupled(d: usize) -> Vec<Vec<f64>> {
    vec![Vec::new(); d]
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
