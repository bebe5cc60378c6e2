//! Noise predictor contract and analytic Gaussian oracles.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::{NoiseSchedule, NUMERIC_FLOOR};

pub type Latent = Vec<f64>;
pub type Embedding = Vec<f64>;

/// `ε_θ(z, t, e)`. Implementations must be pure.
pub trait NoisePredictor: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn eps(&self, z: &[f64], t: f64, e: &[f64]) -> Result<Latent>;

    /// Directional derivative `(∂ε/∂e)·v`, when the predictor knows it.
    fn eps_grad_embedding(&self, _z: &[f64], _t: f64, _e: &[f64], _v: &[f64]) -> Option<Result<Latent>> {
        None
    }

    /// `∂⟨adjoint, ε⟩/∂e`, when the predictor knows it. The default builds it
    /// from one directional derivative per embedding coordinate.
    fn eps_vjp_embedding(&self, z: &[f64], t: f64, e: &[f64], adjoint: &[f64]) -> Option<Result<Embedding>> {
        let m = self.embed_dim();
        let mut out = Vec::with_capacity(m);
        let mut unit = vec![0.0; m];
        for k in 0..m {
            unit[k] = 1.0;
            let col = match self.eps_grad_embedding(z, t, e, &unit)? {
                Ok(c) => c,
                Err(err) => return Some(Err(err)),
            };
            unit[k] = 0.0;
            out.push(dot(adjoint, &col));
        }
        Some(Ok(out))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Data distribution `N(μ + B·e, diag(σ²))` seen through the forward process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianOracleConfig {
    pub mu: Vec<f64>,
    /// Diagonal of the data covariance (variances).
    pub sigma_diag: Vec<f64>,
    /// `d` rows of `m` entries; empty rows mean the oracle ignores embeddings.
    pub embedding_coupling: Vec<Vec<f64>>,
}

impl GaussianOracleConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.mu.len();
        check_dim(d, self.sigma_diag.len())?;
        check_dim(d, self.embedding_coupling.len())?;
        if let Some(s) = self.sigma_diag.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidRange(format!("sigma_diag entry {s} must be > 0")));
        }
        let m = self.embedding_coupling.first().map_or(0, Vec::len);
        for row in &self.embedding_coupling {
            check_dim(m, row.len())?;
        }
        Ok(())
    }

    fn embed_dim(&self) -> usize {
        self.embedding_coupling.first().map_or(0, Vec::len)
    }

    fn coupled(&self, v: &[f64]) -> Vec<f64> {
        self.embedding_coupling.iter().map(|row| dot(row, v)).collect()
    }
}

/// Bayes-optimal `ε` for the Gaussian data model.
///
/// Written per coordinate as `s/(aσ² + s²)·(z − √a·μ_e)` with `a = ᾱ(t)`,
/// `s = √(1−a)`, which stays finite as `a → 1`.
pub fn gaussian_oracle_eps(
    cfg: &GaussianOracleConfig,
    schedule: &NoiseSchedule,
    z: &[f64],
    t: f64,
    e: &[f64],
) -> Result<Latent> {
    let d = cfg.mu.len();
    check_dim(d, z.len())?;
    check_dim(cfg.embed_dim(), e.len())?;
    let a = schedule.alpha_bar(t);
    let s = (1.0 - a).max(0.0).sqrt();
    let ra = a.sqrt();
    let shift = cfg.coupled(e);
    Ok((0..d)
        .map(|j| {
            let mean = cfg.mu[j] + shift[j];
            s / (a * cfg.sigma_diag[j] + s * s) * (z[j] - ra * mean)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub cfg: GaussianOracleConfig,
    pub schedule: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(cfg: GaussianOracleConfig, schedule: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, schedule })
    }

    /// Per-coordinate factor `−s√a/(aσ² + s²)` of `∂ε/∂μ_e`.
    fn mean_sensitivity(&self, t: f64) -> Vec<f64> {
        let a = self.schedule.alpha_bar(t);
        let s = (1.0 - a).max(0.0).sqrt();
        self.cfg.sigma_diag.iter().map(|v| -s * a.sqrt() / (a * v + s * s)).collect()
    }

    /// Exact probability-flow transport of `z` from level `t` to level `k`.
    pub fn exact_flow(&self, z: &[f64], t: f64, k: f64, e: &[f64]) -> Result<Latent> {
        check_dim(self.dim(), z.len())?;
        check_dim(self.embed_dim(), e.len())?;
        let (at, ak) = (self.schedule.alpha_bar(t), self.schedule.alpha_bar(k));
        let shift = self.cfg.coupled(e);
        Ok((0..z.len())
            .map(|j| {
                let mean = self.cfg.mu[j] + shift[j];
                let var = self.cfg.sigma_diag[j];
                let vt = at * var + 1.0 - at;
                let vk = ak * var + 1.0 - ak;
                ak.sqrt() * mean + (vk / vt).sqrt() * (z[j] - at.sqrt() * mean)
            })
            .collect())
    }
}

impl NoisePredictor for GaussianOracle {
    fn dim(&self) -> usize {
        self.cfg.mu.len()
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim()
    }

    fn eps(&self, z: &[f64], t: f64, e: &[f64]) -> Result<Latent> {
        gaussian_oracle_eps(&self.cfg, &self.schedule, z, t, e)
    }

    fn eps_grad_embedding(&self, z: &[f64], t: f64, e: &[f64], v: &[f64]) -> Option<Result<Latent>> {
        let check = check_dim(self.dim(), z.len())
            .and(check_dim(self.embed_dim(), e.len()))
            .and(check_dim(self.embed_dim(), v.len()));
        if let Err(err) = check {
            return Some(Err(err));
        }
        let bv = self.cfg.coupled(v);
        let sens = self.mean_sensitivity(t);
        Some(Ok(sens.iter().zip(bv).map(|(c, b)| c * b).collect()))
    }

    fn eps_vjp_embedding(&self, z: &[f64], t: f64, e: &[f64], adjoint: &[f64]) -> Option<Result<Embedding>> {
        let check = check_dim(self.dim(), z.len())
            .and(check_dim(self.embed_dim(), e.len()))
            .and(check_dim(self.dim(), adjoint.len()));
        if let Err(err) = check {
            return Some(Err(err));
        }
        let sens = self.mean_sensitivity(t);
        let mut out = vec![0.0; self.embed_dim()];
        for (j, row) in self.cfg.embedding_coupling.iter().enumerate() {
            let w = sens[j] * adjoint[j];
            for (o, b) in out.iter_mut().zip(row) {
                *o += w * b;
            }
        }
        Some(Ok(out))
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub dim: usize,
    pub embed_dim: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }
    fn eps(&self, z: &[f64], _t: f64, e: &[f64]) -> Result<Latent> {
        check_dim(self.dim, z.len())?;
        check_dim(self.embed_dim, e.len())?;
        Ok(vec![0.0; self.dim])
    }
    fn eps_grad_embedding(&self, _z: &[f64], _t: f64, _e: &[f64], _v: &[f64]) -> Option<Result<Latent>> {
        Some(Ok(vec![0.0; self.dim]))
    }
}

/// Classifier-free combination `ε(z,t,∅) + w·(ε(z,t,C) − ε(z,t,∅))`, seen as a
/// predictor of the null embedding `∅`.
pub struct Guided<'a> {
    pub inner: &'a dyn NoisePredictor,
    pub cond: &'a [f64],
    pub weight: f64,
}

impl NoisePredictor for Guided<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    fn eps(&self, z: &[f64], t: f64, null: &[f64]) -> Result<Latent> {
        let en = self.inner.eps(z, t, null)?;
        if self.weight == 0.0 {
            return Ok(en);
        }
        let ec = self.inner.eps(z, t, self.cond)?;
        Ok(en.iter().zip(&ec).map(|(n, c)| n + self.weight * (c - n)).collect())
    }

    fn eps_grad_embedding(&self, z: &[f64], t: f64, null: &[f64], v: &[f64]) -> Option<Result<Latent>> {
        let scale = 1.0 - self.weight;
        Some(self.inner.eps_grad_embedding(z, t, null, v)?.map(|g| g.into_iter().map(|x| scale * x).collect()))
    }

    fn eps_vjp_embedding(&self, z: &[f64], t: f64, null: &[f64], adjoint: &[f64]) -> Option<Result<Embedding>> {
        let scale = 1.0 - self.weight;
        Some(self.inner.eps_vjp_embedding(z, t, null, adjoint)?.map(|g| g.into_iter().map(|x| scale * x).collect()))
    }
}

/// `z̃⁰ = (z − √(1−ᾱ)·ε)/√ᾱ`.
pub fn predict_x0(schedule: &NoiseSchedule, z: &[f64], t: f64, eps: &[f64]) -> Result<Latent> {
    check_dim(z.len(), eps.len())?;
    let a = schedule.alpha_bar(t);
    if a <= NUMERIC_FLOOR {
        return Err(Error::DegenerateSchedule { t, alpha_bar: a });
    }
    let s = (1.0 - a).max(0.0).sqrt();
    let ra = a.sqrt();
    Ok(z.iter().zip(eps).map(|(zi, ei)| (zi - s * ei) / ra).collect())
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Central-difference estimate of `∂⟨adjoint, ε⟩/∂e`, one coordinate at a time.
/// The step for coordinate `k` is `rel_step·max(|e_k|, 1)`.
pub fn finite_diff_embedding_grad(
    pred: &dyn NoisePredictor,
    z: &[f64],
    t: f64,
    e: &[f64],
    adjoint: &[f64],
    rel_step: f64,
) -> Result<Embedding> {
    check_dim(pred.dim(), adjoint.len())?;
    let mut probe = e.to_vec();
    let mut out = Vec::with_capacity(e.len());
    for k in 0..e.len() {
        let h = rel_step * e[k].abs().max(1.0);
        probe[k] = e[k] + h;
        let up = dot(adjoint, &pred.eps(z, t, &probe)?);
        probe[k] = e[k] - h;
        let down = dot(adjoint, &pred.eps(z, t, &probe)?);
        probe[k] = e[k];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Analytic derivative when the predictor offers one, else finite differences.
    #[default]
    Auto,
    FiniteDifference,
}

/// `∂⟨adjoint, ε⟩/∂e` by the requested method.
pub fn embedding_gradient(
    pred: &dyn NoisePredictor,
    z: &[f64],
    t: f64,
    e: &[f64],
    adjoint: &[f64],
    method: GradientMethod,
) -> Result<Embedding> {
    if method == GradientMethod::Auto {
        if let Some(g) = pred.eps_vjp_embedding(z, t, e, adjoint) {
            return g;
        }
    }
    finite_diff_embedding_grad(pred, z, t, e, adjoint, DEFAULT_FD_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(mu: Vec<f64>, var: Vec<f64>, coupling: Vec<Vec<f64>>) -> GaussianOracle {
        GaussianOracle::new(
            GaussianOracleConfig { mu, sigma_diag: var, embedding_coupling: coupling },
            NoiseSchedule::default(),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_data_gives_scaled_identity() {
        let o = oracle(vec![0.0; 3], vec![1.0; 3], vec![vec![]; 3]);
        let z = [0.3, -1.2, 2.0];
        for t in [0.05, 0.5, 0.97] {
            let s = (1.0 - o.schedule.alpha_bar(t)).sqrt();
            let eps = o.eps(&z, t, &[]).unwrap();
            for (e, zi) in eps.iter().zip(z) {
                assert!((e - s * zi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn clean_end_is_finite() {
        let o = oracle(vec![1.0, 2.0], vec![0.01, 4.0], vec![vec![]; 2]);
        let eps = o.eps(&[5.0, -3.0], 0.0, &[]).unwrap();
        assert_eq!(eps, vec![0.0, 0.0]);
        let x0 = predict_x0(&o.schedule, &[5.0, -3.0], 0.0, &eps).unwrap();
        assert_eq!(x0, vec![5.0, -3.0]);
    }

    #[test]
    fn zero_embedding_ignores_coupling() {
        let a = oracle(vec![0.5, -0.5], vec![0.3, 2.0], vec![vec![3.0, -1.0], vec![0.2, 7.0]]);
        let b = oracle(vec![0.5, -0.5], vec![0.3, 2.0], vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let z = [0.1, 0.9];
        assert_eq!(a.eps(&z, 0.4, &[0.0, 0.0]).unwrap(), b.eps(&z, 0.4, &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn predict_x0_inverts_forward_noise() {
        let s = NoiseSchedule::default();
        let x0 = [0.7, -1.3, 2.2];
        let noise = [0.4, 1.1, -0.8];
        for t in [0.0, 0.01, 0.3, 0.8, 1.0] {
            let a = s.alpha_bar(t);
            let z: Vec<f64> = x0.iter().zip(noise).map(|(x, n)| a.sqrt() * x + (1.0 - a).sqrt() * n).collect();
            let back = predict_x0(&s, &z, t, &noise).unwrap();
            for (b, x) in back.iter().zip(x0) {
                assert!((b - x).abs() < 1e-12, "t={t}");
            }
        }
        let zero = predict_x0(&s, &[2.0], 0.5, &[0.0]).unwrap();
        assert_eq!(zero[0], 2.0 / s.alpha_bar(0.5).sqrt());
    }

    #[test]
    fn degenerate_schedule_rejected() {
        let s = NoiseSchedule::from_betas(vec![0.999999; 4]).unwrap();
        assert!(matches!(predict_x0(&s, &[1.0], 1.0, &[0.0]), Err(Error::DegenerateSchedule { .. })));
    }

    #[test]
    fn guidance_weight_zero_is_the_null_path() {
        let o = oracle(vec![0.0, 1.0], vec![1.0, 0.5], vec![vec![1.0], vec![-2.0]]);
        let cond = [3.0];
        let g = Guided { inner: &o, cond: &cond, weight: 0.0 };
        assert_eq!(g.eps(&[0.2, 0.1], 0.6, &[0.5]).unwrap(), o.eps(&[0.2, 0.1], 0.6, &[0.5]).unwrap());
        let g = Guided { inner: &o, cond: &cond, weight: 1.0 };
        let full = g.eps(&[0.2, 0.1], 0.6, &[0.5]).unwrap();
        let want = o.eps(&[0.2, 0.1], 0.6, &cond).unwrap();
        for (a, b) in full.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let grad = g.eps_grad_embedding(&[0.2, 0.1], 0.6, &[0.5], &[1.0]).unwrap().unwrap();
        assert!(grad.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let o = oracle(vec![0.0, 1.0], vec![1.0, 0.5], vec![vec![1.0, 0.3], vec![-2.0, 0.1]]);
        let g = finite_diff_embedding_grad(&o, &[0.2, 0.1], 0.6, &[0.5, 0.1], &[0.0, 0.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }
}
