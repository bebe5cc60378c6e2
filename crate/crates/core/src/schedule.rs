//! Noise coefficient tables and timestep grids.
//!
//! Timesteps are continuous values in `[0, 1]`: `1` is the pure-noise end, `0`
//! is clean data. Both solver grids are evaluated against one [`NoiseSchedule`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TAU_MAX: f64 = 0.9999;
pub const TAU_MIN: f64 = 0.0001;
pub const SIGMA_MAX: f64 = 0.99;
pub const SIGMA_MIN: f64 = 0.01;

/// Floor applied to `ᾱ` and `1 − ᾱ` before square roots and logs.
pub const NUMERIC_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub num_train_steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule.
    pub fn linear(num_train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_train_steps < 2 {
            return Err(Error::InvalidRange(format!("num_train_steps must be >= 2, got {num_train_steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let last = (num_train_steps - 1) as f64;
        let betas = (0..num_train_steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / last).collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("empty beta table".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { num_train_steps: betas.len(), betas, alpha_bars })
    }

    /// `ᾱ(t)` by linear interpolation over the table.
    ///
    /// The table is read with `t = 0` as an implicit clean entry (`ᾱ = 1`) and
    /// `t = k/N` landing on training step `k`, so `ᾱ(1/N) = 1 − β₁` and
    /// `ᾱ(1) = ᾱ_N`. Values of `t` outside `[0, 1]` are clamped.
    pub fn alpha_bar(&self, t: f64) -> f64 {
        let n = self.num_train_steps;
        let p = t.clamp(0.0, 1.0) * n as f64;
        let i = p.floor() as usize;
        if i >= n {
            return self.alpha_bars[n - 1];
        }
        let f = p - i as f64;
        let lo = if i == 0 { 1.0 } else { self.alpha_bars[i - 1] };
        let hi = self.alpha_bars[i];
        if f == 0.0 {
            lo
        } else {
            lo * (1.0 - f) + hi * f
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 0.00085, 0.012).expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    DdimLinear,
    DpmLogUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepGrid {
    pub values: Vec<f64>,
    pub kind: GridKind,
}

fn check_grid_len(steps: usize) -> Result<()> {
    if steps < 2 {
        return Err(Error::InvalidRange(format!("grid needs T >= 2, got {steps}")));
    }
    Ok(())
}

/// Uniform decay from `TAU_MAX` to `TAU_MIN`.
pub fn ddim_grid(steps: usize) -> Result<TimestepGrid> {
    check_grid_len(steps)?;
    let last = (steps - 1) as f64;
    let values = (0..steps)
        .map(|i| {
            let f = i as f64 / last;
            (1.0 - f) * TAU_MAX + f * TAU_MIN
        })
        .collect();
    Ok(TimestepGrid { values, kind: GridKind::DdimLinear })
}

/// Log-uniform decay from `SIGMA_MAX` to `SIGMA_MIN`.
pub fn dpm_grid(steps: usize) -> Result<TimestepGrid> {
    check_grid_len(steps)?;
    let last = (steps - 1) as f64;
    let (hi, lo) = (SIGMA_MAX.ln(), SIGMA_MIN.ln());
    let values = (0..steps)
        .map(|i| match i {
            0 => SIGMA_MAX,
            _ if i + 1 == steps => SIGMA_MIN,
            _ => (hi + (i as f64 / last) * (lo - hi)).exp(),
        })
        .collect();
    Ok(TimestepGrid { values, kind: GridKind::DpmLogUniform })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Solver {
    #[serde(rename = "DDIM")]
    Ddim,
    #[serde(rename = "DPM")]
    Dpm,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Ddim => "DDIM",
            Solver::Dpm => "DPM",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DDIM" => Ok(Solver::Ddim),
            "DPM" => Ok(Solver::Dpm),
            other => Err(Error::Parse(format!("unknown solver tag {other:?}"))),
        }
    }
}

/// Which end of the plan the `[s1, s2]` window is counted from.
///
/// `FromNoise` counts reconstruction steps starting at the pure-noise end;
/// `FromData` counts from the data end, so index 0 is the last reconstruction
/// step. Grid lookups follow the same positions either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexConvention {
    FromNoise,
    #[default]
    FromData,
}

impl FromStr for IndexConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "from_noise" => Ok(IndexConvention::FromNoise),
            "from_data" => Ok(IndexConvention::FromData),
            other => Err(Error::Parse(format!("unknown index convention {other:?}"))),
        }
    }
}

/// One solver step in reconstruction direction, `from > to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub from: f64,
    pub to: f64,
    pub solver: Solver,
}

/// Globally pre-computed timestep sequence with one solver tag per step.
///
/// Reconstruction step `i` integrates from `timesteps[i]` to `timesteps[i + 1]`;
/// the last step lands on `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPlan {
    pub timesteps: Vec<f64>,
    pub solver_tags: Vec<Solver>,
    /// DPM window `[s1, s2]` in `convention` indices; `None` for a pure DDIM plan.
    pub dpm_window: Option<(usize, usize)>,
    pub convention: IndexConvention,
}

impl HybridPlan {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Reconstruction position of convention index `idx`.
    pub fn position(&self, idx: usize) -> usize {
        position(self.len(), idx, self.convention)
    }

    /// Convention indices tagged DPM, ascending.
    pub fn dpm_steps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.len())
            .filter(|&p| self.solver_tags[p] == Solver::Dpm)
            .map(|p| position(self.len(), p, self.convention))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn intervals(&self) -> Vec<Interval> {
        let n = self.len();
        (0..n)
            .map(|i| Interval {
                from: self.timesteps[i],
                to: if i + 1 < n { self.timesteps[i + 1] } else { 0.0 },
                solver: self.solver_tags[i],
            })
            .collect()
    }

    /// Plan with every step tagged DDIM on the DDIM grid.
    pub fn ddim_only(steps: usize) -> Result<Self> {
        let grid = ddim_grid(steps)?;
        Ok(Self {
            solver_tags: vec![Solver::Ddim; steps],
            timesteps: grid.values,
            dpm_window: None,
            convention: IndexConvention::FromNoise,
        })
    }

    /// Plan with every step tagged DPM on the DPM grid.
    pub fn dpm_only(steps: usize) -> Result<Self> {
        hybrid_grid(steps, 0, steps.saturating_sub(1), IndexConvention::FromNoise)
    }

    /// CSV rows `step_index,timestep,solver_tag` in reconstruction order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step_index,timestep,solver_tag\n");
        for (i, (t, tag)) in self.timesteps.iter().zip(&self.solver_tags).enumerate() {
            s.push_str(&format!("{i},{t},{tag}\n"));
        }
        s
    }
}

// The mapping is an involution, so it converts in both directions.
fn position(len: usize, idx: usize, convention: IndexConvention) -> usize {
    match convention {
        IndexConvention::FromNoise => idx,
        IndexConvention::FromData => len - 1 - idx,
    }
}

/// Splice the DDIM and DPM grids: DPM values on `[s1, s2]`, DDIM elsewhere.
pub fn hybrid_grid(steps: usize, s1: usize, s2: usize, convention: IndexConvention) -> Result<HybridPlan> {
    if s1 > s2 || s2 >= steps {
        return Err(Error::InvalidRange(format!("need 0 <= s1 <= s2 < T, got s1={s1}, s2={s2}, T={steps}")));
    }
    let tau = ddim_grid(steps)?.values;
    let sigma = dpm_grid(steps)?.values;
    let mut timesteps = Vec::with_capacity(steps);
    let mut solver_tags = Vec::with_capacity(steps);
    for p in 0..steps {
        let idx = position(steps, p, convention);
        if (s1..=s2).contains(&idx) {
            timesteps.push(sigma[p]);
            solver_tags.push(Solver::Dpm);
        } else {
            timesteps.push(tau[p]);
            solver_tags.push(Solver::Ddim);
        }
    }
    for i in 1..steps {
        if timesteps[i] >= timesteps[i - 1] {
            return Err(Error::NonMonotoneSplice { index: i, prev: timesteps[i - 1], next: timesteps[i] });
        }
    }
    Ok(HybridPlan { timesteps, solver_tags, dpm_window: Some((s1, s2)), convention })
}

/// Solver segments that each recompute their own grid over the full range,
/// as a locally scheduled sampler would. Used to contrast with [`HybridPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentedPlan {
    pub segments: Vec<(Solver, usize)>,
}

impl FragmentedPlan {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn intervals(&self) -> Result<Vec<Interval>> {
        let mut out = Vec::with_capacity(self.len());
        for &(solver, n) in &self.segments {
            let grid = match solver {
                Solver::Ddim => ddim_grid(n)?,
                Solver::Dpm => dpm_grid(n)?,
            };
            for i in 0..n {
                out.push(Interval {
                    from: grid.values[i],
                    to: if i + 1 < n { grid.values[i + 1] } else { 0.0 },
                    solver,
                });
            }
        }
        Ok(out)
    }
}
