//! PSNR, cosine similarity and trajectory stability statistics.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::sampler::{Direction, Trajectory};

pub const PSNR_THRESHOLD_DB: f64 = 25.0;

/// `10·log₁₀(max²/MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &[f64], b: &[f64], max_value: f64) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if !(max_value > 0.0) {
        return Err(Error::InvalidRange(format!("max_value must be positive, got {max_value}")));
    }
    if a.is_empty() {
        return Err(Error::InvalidRange("psnr of empty inputs".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Peak-to-peak range, the default PSNR peak for latents.
pub fn value_range(v: &[f64]) -> f64 {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    hi - lo
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Mean over steps of `‖z_rec − z_inv‖²/d` at matching levels.
    pub cumulative_mse: f64,
    /// Largest `‖z_after − z_before‖²/d` over reconstruction steps.
    pub max_jump: f64,
    /// `‖z̄⁰ − z⁰‖₂/√d`.
    pub final_l2: f64,
    pub psnr_db: f64,
}

impl StabilityReport {
    pub const CSV_HEADER: &'static str = "cumulative_mse,max_jump,final_l2,psnr_db";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.cumulative_mse, self.max_jump, self.final_l2, self.psnr_db)
    }

    pub fn summary(&self) -> String {
        format!(
            "cumulative MSE   {:.6e}\nmax jump         {:.6e}\nfinal latent L2  {:.6e}\nPSNR             {:.3} dB\n",
            self.cumulative_mse, self.max_jump, self.final_l2, self.psnr_db
        )
    }
}

fn msd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Squared displacement per dimension of each reconstruction step.
pub fn step_jumps(rec: &Trajectory) -> Vec<f64> {
    rec.steps.iter().map(|s| msd(&s.latent_after, &s.latent_before)).collect()
}

/// Stability statistics of a reconstruction against the inversion it mirrors.
/// `max_value` defaults to the range of `source`.
pub fn stability_report(
    inv: &Trajectory,
    rec: &Trajectory,
    source: &[f64],
    max_value: Option<f64>,
) -> Result<StabilityReport> {
    if inv.direction != Direction::Inversion || rec.direction != Direction::Reconstruction {
        return Err(Error::PlanMismatch("need an inversion and a reconstruction".into()));
    }
    if inv.intervals != rec.intervals || inv.steps.len() != rec.steps.len() || rec.steps.is_empty() {
        return Err(Error::PlanMismatch("trajectories were run on different plans".into()));
    }
    let n = rec.steps.len();
    let d = source.len();
    let fin = rec.final_latent().expect("non-empty");
    check_dim(d, fin.len())?;
    let cumulative_mse =
        (0..n).map(|i| msd(&rec.steps[i].latent_after, &inv.steps[n - 1 - i].latent_before)).sum::<f64>() / n as f64;
    let max_jump = step_jumps(rec).into_iter().fold(0.0, f64::max);
    let final_l2 = fin.iter().zip(source).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / (d as f64).sqrt();
    let peak = max_value.unwrap_or_else(|| value_range(source));
    let psnr_db = psnr(fin, source, peak)?;
    Ok(StabilityReport { cumulative_mse, max_jump, final_l2, psnr_db })
}
