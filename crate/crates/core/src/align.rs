//! Dual-trajectory inversion with a learnable symmetric mixing weight that
//! drives both latents to one shared noise latent.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nulltext::EmbeddingSchedule;
use crate::predictor::{Latent, NoisePredictor};
use crate::sampler::{invert_interval, Direction, Dpm2mState, DpmOrder, StepRecord, Trajectory};
use crate::schedule::{HybridPlan, Interval, NoiseSchedule};

pub const LAMBDA_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MergeMode {
    FinalStepOnly,
    /// Merge as soon as `λ ≥ 0.5 − delta`; the final step merges regardless.
    Threshold {
        delta: f64,
    },
}

impl Default for MergeMode {
    fn default() -> Self {
        MergeMode::Threshold { delta: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingState {
    pub lambda_t: f64,
    pub eta: f64,
    pub merge_mode: MergeMode,
}

impl MixingState {
    pub fn new(lambda_t: f64, eta: f64, merge_mode: MergeMode) -> Result<Self> {
        check_lambda(lambda_t)?;
        if !(eta > 0.0) {
            return Err(Error::InvalidRange(format!("eta must be positive, got {eta}")));
        }
        Ok(Self { lambda_t, eta, merge_mode })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=LAMBDA_MAX).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidRange(format!("lambda must lie in [0, 0.5], got {lambda}")))
    }
}

/// `((1−λ)z₁ + λz₂, (1−λ)z₂ + λz₁)`.
pub fn adaptive_mix_step(z1: &[f64], z2: &[f64], lambda_t: f64) -> Result<(Latent, Latent)> {
    check_lambda(lambda_t)?;
    check_dim(z1.len(), z2.len())?;
    let keep = 1.0 - lambda_t;
    let a = z1.iter().zip(z2).map(|(a, b)| keep * a + lambda_t * b).collect();
    let b = z2.iter().zip(z1).map(|(a, b)| keep * a + lambda_t * b).collect();
    Ok((a, b))
}

/// Mean squared per-element difference.
pub fn discrepancy(z1: &[f64], z2: &[f64]) -> f64 {
    if z1.is_empty() {
        return 0.0;
    }
    z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / z1.len() as f64
}

/// `L_align(λ) = (1−2λ)²·D`.
pub fn align_loss(lambda: f64, d: f64) -> f64 {
    let f = 1.0 - 2.0 * lambda;
    f * f * d
}

/// One descent step on `L_align(λ) = (1−2λ)²·D`, clamped to `[0, 0.5]`.
pub fn lambda_update(state: &MixingState, z1: &[f64], z2: &[f64]) -> MixingState {
    let d = discrepancy(z1, z2);
    let lambda = state.lambda_t + 4.0 * state.eta * (1.0 - 2.0 * state.lambda_t) * d;
    MixingState { lambda_t: lambda.clamp(0.0, LAMBDA_MAX), ..*state }
}

/// `(z₁ + z₂)/2`.
pub fn hard_merge(z1: &[f64], z2: &[f64]) -> Result<Latent> {
    check_dim(z1.len(), z2.len())?;
    Ok(z1.iter().zip(z2).map(|(a, b)| 0.5 * (a + b)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AlignWarning {
    /// `λ` was still below 0.45 when the merge fired.
    NonConvergence { step: usize, lambda: f64 },
    /// The alignment loss rose between consecutive mixing steps.
    NonMonotoneLoss { step: usize, previous: f64, current: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub init_lambda: f64,
    pub eta: f64,
    pub merge: MergeMode,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { init_lambda: 0.04, eta: 0.01, merge: MergeMode::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub traj_1: Trajectory,
    pub traj_2: Trajectory,
    /// `λ` applied at each inversion step.
    pub lambda_history: Vec<f64>,
    /// Post-mix alignment loss at each inversion step.
    pub loss_history: Vec<f64>,
    /// Pre-mix discrepancy `D` at each inversion step.
    pub discrepancy_history: Vec<f64>,
    /// Inversion step at which the hard merge fired.
    pub merge_step: usize,
    pub z_shared: Latent,
    pub warnings: Vec<AlignWarning>,
}

impl AlignedPair {
    /// CSV `step,lambda,align_loss,l2_z1_z2` with the post-mix L2 distance.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lambda,align_loss,l2_z1_z2\n");
        for (j, (l, loss)) in self.lambda_history.iter().zip(&self.loss_history).enumerate() {
            let a = &self.traj_1.steps[j].latent_after;
            let b = &self.traj_2.steps[j].latent_after;
            let l2 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            s.push_str(&format!("{j},{l},{loss},{l2}\n"));
        }
        s
    }
}

/// Align the inversions of two sources over a shared plan.
///
/// Per step: each latent advances with its own predictor, the pair is mixed
/// with the current `λ`, then `λ` takes one descent step against the pre-mix
/// discrepancy. Once the merge trigger fires both latents are replaced by
/// their average and `λ` stays at 0.5.
#[allow(clippy::too_many_arguments)]
pub fn align_inversion(
    plan: &HybridPlan,
    schedule: &NoiseSchedule,
    pred1: &dyn NoisePredictor,
    pred2: &dyn NoisePredictor,
    z1_0: &[f64],
    z2_0: &[f64],
    emb1: &EmbeddingSchedule,
    emb2: &EmbeddingSchedule,
    cfg: &AlignConfig,
) -> Result<AlignedPair> {
    align_intervals(&plan.intervals(), schedule, [pred1, pred2], [z1_0, z2_0], [emb1, emb2], cfg, DpmOrder::Second)
}

pub fn align_intervals(
    intervals: &[Interval],
    schedule: &NoiseSchedule,
    preds: [&dyn NoisePredictor; 2],
    sources: [&[f64]; 2],
    embs: [&EmbeddingSchedule; 2],
    cfg: &AlignConfig,
    order: DpmOrder,
) -> Result<AlignedPair> {
    let n = intervals.len();
    if n == 0 {
        return Err(Error::InvalidRange("empty plan".into()));
    }
    check_dim(sources[0].len(), sources[1].len())?;
    for e in embs {
        if e.nulls.len() < n {
            return Err(Error::PlanMismatch(format!("{} embeddings for {n} steps", e.nulls.len())));
        }
    }
    let mut mixing = MixingState::new(cfg.init_lambda, cfg.eta, cfg.merge)?;
    let guided = [embs[0].guided(preds[0]), embs[1].guided(preds[1])];
    let mut z = [sources[0].to_vec(), sources[1].to_vec()];
    let mut states = [Dpm2mState::new(order), Dpm2mState::new(order)];
    let mut records: [Vec<StepRecord>; 2] = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut lambda_history = Vec::with_capacity(n);
    let mut loss_history = Vec::with_capacity(n);
    let mut discrepancy_history = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    let mut merged = false;
    let mut merge_step = n - 1;

    for j in 0..n {
        let idx = n - 1 - j;
        let iv = &intervals[idx];
        let (o1, o2) = rayon::join(
            || invert_interval(schedule, &guided[0], iv, &z[0], &embs[0].nulls[idx], &states[0]),
            || invert_interval(schedule, &guided[1], iv, &z[1], &embs[1].nulls[idx], &states[1]),
        );
        let (o1, o2) = (o1?, o2?);
        let d = discrepancy(&o1.z, &o2.z);
        discrepancy_history.push(d);

        let (a1, a2, used) = if merged || j == n - 1 {
            if !merged {
                merge_step = j;
                if mixing.lambda_t < 0.45 {
                    warnings.push(AlignWarning::NonConvergence { step: j, lambda: mixing.lambda_t });
                }
                merged = true;
            }
            mixing.lambda_t = LAMBDA_MAX;
            let m = hard_merge(&o1.z, &o2.z)?;
            (m.clone(), m, LAMBDA_MAX)
        } else {
            let used = mixing.lambda_t;
            let (a1, a2) = adaptive_mix_step(&o1.z, &o2.z, used)?;
            mixing = lambda_update(&mixing, &o1.z, &o2.z);
            if let MergeMode::Threshold { delta } = mixing.merge_mode {
                if mixing.lambda_t >= LAMBDA_MAX - delta {
                    merged = true;
                    merge_step = j + 1;
                    if mixing.lambda_t < 0.45 {
                        warnings.push(AlignWarning::NonConvergence { step: j, lambda: mixing.lambda_t });
                    }
                }
            }
            (a1, a2, used)
        };

        let loss = align_loss(used, d);
        if let Some(&prev) = loss_history.last() {
            if loss > prev {
                warnings.push(AlignWarning::NonMonotoneLoss { step: j, previous: prev, current: loss });
            }
        }
        lambda_history.push(used);
        loss_history.push(loss);

        for (k, (out, after)) in [(o1, a1), (o2, a2)].into_iter().enumerate() {
            records[k].push(StepRecord {
                step_index: idx,
                timestep: iv.from,
                solver_tag: iv.solver,
                latent_before: std::mem::replace(&mut z[k], after.clone()),
                latent_after: after,
                x0_estimate: out.x0,
            });
            states[k] = out.state;
        }
    }

    let [r1, r2] = records;
    let z_shared = z[0].clone();
    Ok(AlignedPair {
        traj_1: Trajectory { direction: Direction::Inversion, steps: r1, intervals: intervals.to_vec() },
        traj_2: Trajectory { direction: Direction::Inversion, steps: r2, intervals: intervals.to_vec() },
        lambda_history,
        loss_history,
        discrepancy_history,
        merge_step,
        z_shared,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_examples() {
        let (a, b) = adaptive_mix_step(&[1.0, 0.0], &[0.0, 1.0], 0.25).unwrap();
        assert_eq!(a, vec![0.75, 0.25]);
        assert_eq!(b, vec![0.25, 0.75]);
        let (a, b) = adaptive_mix_step(&[1.0, 2.0], &[3.0, 5.0], 0.0).unwrap();
        assert_eq!((a, b), (vec![1.0, 2.0], vec![3.0, 5.0]));
        let (a, b) = adaptive_mix_step(&[1.0, 2.0], &[3.0, 5.0], 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![2.0, 3.5]);
        assert!(adaptive_mix_step(&[1.0], &[2.0], 0.6).is_err());
        assert!(adaptive_mix_step(&[1.0], &[2.0], -0.1).is_err());
    }

    #[test]
    fn lambda_update_examples() {
        let st = MixingState::new(0.04, 0.01, MergeMode::default()).unwrap();
        // Unit mean squared discrepancy.
        let next = lambda_update(&st, &[1.0, -1.0], &[0.0, 0.0]);
        assert!((next.lambda_t - 0.0768).abs() < 1e-15);
        assert_eq!(lambda_update(&st, &[0.3, 0.3], &[0.3, 0.3]).lambda_t, 0.04);
        let half = MixingState { lambda_t: 0.5, ..st };
        assert_eq!(lambda_update(&half, &[5.0], &[-5.0]).lambda_t, 0.5);
        let big = MixingState { lambda_t: 0.4, eta: 10.0, ..st };
        assert_eq!(lambda_update(&big, &[5.0], &[-5.0]).lambda_t, 0.5);
    }

    #[test]
    fn merge_examples() {
        assert_eq!(hard_merge(&[2.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        let m = vec![0.3, -1.7];
        assert_eq!(hard_merge(&m, &m).unwrap(), m);
        assert!(hard_merge(&[1.0], &[1.0, 2.0]).is_err());
    }
}
