//! Parameter sweeps and solver benchmarks built on the pipeline stages.

use serde::{Deserialize, Serialize};

use crate::align::AlignWarning;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::{stability_report, step_jumps, StabilityReport};
use crate::nulltext::EmbeddingSchedule;
use crate::pipeline::{build_scenario, run_alignment_and_nulltext, AtStage, Scenario, Stage, StageError};
use crate::sampler::{run_intervals, Direction, Trajectory};
use crate::schedule::{hybrid_grid, FragmentedPlan, HybridPlan, Interval, Solver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub init_lambda: f64,
    pub psnr_1: f64,
    pub psnr_2: f64,
    pub min_psnr: f64,
    pub merge_step: usize,
    pub final_lambda: f64,
    /// Number of steps at which the alignment loss rose.
    pub loss_increases: usize,
}

pub fn lambda_row(cfg: &ExperimentConfig, init_lambda: f64) -> std::result::Result<LambdaRow, StageError> {
    let mut cfg = cfg.clone();
    cfg.align.init_lambda = init_lambda;
    let (_, out) = run_alignment_and_nulltext(&cfg)?;
    let a = &out.aligned;
    Ok(LambdaRow {
        init_lambda,
        psnr_1: out.stability[0].psnr_db,
        psnr_2: out.stability[1].psnr_db,
        min_psnr: out.min_psnr(),
        merge_step: a.merge_step,
        final_lambda: *a.lambda_history.last().unwrap_or(&0.0),
        loss_increases: a.warnings.iter().filter(|w| matches!(w, AlignWarning::NonMonotoneLoss { .. })).count(),
    })
}

pub fn sweep_lambda(cfg: &ExperimentConfig, values: &[f64]) -> std::result::Result<Vec<LambdaRow>, StageError> {
    values.iter().map(|&v| lambda_row(cfg, v)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpmRangeRow {
    pub s1: usize,
    pub s2: usize,
    /// Reconstruction PSNR of the worse identity; NaN when the range is invalid.
    pub min_psnr: f64,
    pub error: Option<String>,
}

/// One DPM window; an invalid splice is reported in the row, not raised.
pub fn dpm_range_row(cfg: &ExperimentConfig, s1: usize, s2: usize) -> std::result::Result<DpmRangeRow, StageError> {
    let mut cfg = cfg.clone();
    cfg.plan.s1 = s1;
    cfg.plan.s2 = s2;
    if let Err(e) = hybrid_grid(cfg.plan.steps, s1, s2, cfg.plan.convention) {
        return Ok(DpmRangeRow { s1, s2, min_psnr: f64::NAN, error: Some(e.to_string()) });
    }
    let (_, out) = run_alignment_and_nulltext(&cfg)?;
    Ok(DpmRangeRow { s1, s2, min_psnr: out.min_psnr(), error: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub report: StabilityReport,
    /// Largest reconstruction step displacement at a solver switch of the plan.
    pub boundary_jump: f64,
}

/// Plain inversion then reconstruction of source 1 under its conditional embedding.
pub fn round_trip(sc: &Scenario, intervals: &[Interval]) -> Result<(Trajectory, Trajectory)> {
    let emb = EmbeddingSchedule::conditional_only(sc.conds[0].clone(), intervals.len());
    let pred = &sc.oracles[0];
    let inv = run_intervals(intervals, &sc.schedule, pred, &sc.sources[0], &emb, Direction::Inversion, sc.order)?;
    let z_t = inv.final_latent().expect("non-empty plan").clone();
    let rec = run_intervals(intervals, &sc.schedule, pred, &z_t, &emb, Direction::Reconstruction, sc.order)?;
    Ok((inv, rec))
}

/// Same solver sequence as `plan`, but each contiguous solver run computes its
/// own grid over the full range.
pub fn fragmented_of(plan: &HybridPlan) -> FragmentedPlan {
    let mut segments: Vec<(Solver, usize)> = Vec::new();
    for &tag in &plan.solver_tags {
        match segments.last_mut() {
            Some((s, n)) if *s == tag => *n += 1,
            _ => segments.push((tag, 1)),
        }
    }
    FragmentedPlan { segments }
}

/// Plan positions where the solver changes.
pub fn switch_positions(plan: &HybridPlan) -> Vec<usize> {
    (1..plan.len()).filter(|&i| plan.solver_tags[i] != plan.solver_tags[i - 1]).collect()
}

/// Round-trip stability of DDIM-only, DPM-only, fragmented and global plans
/// of the configured length.
pub fn bench_solver(cfg: &ExperimentConfig) -> std::result::Result<Vec<BenchRow>, StageError> {
    let sc = build_scenario(cfg).at(Stage::Config)?;
    let steps = sc.plan.len();
    let switches = switch_positions(&sc.plan);
    let variants: Vec<(&str, Vec<Interval>)> = vec![
        ("ddim", HybridPlan::ddim_only(steps).at(Stage::Config)?.intervals()),
        ("dpm", HybridPlan::dpm_only(steps).at(Stage::Config)?.intervals()),
        ("fragmented", fragmented_of(&sc.plan).intervals().at(Stage::Config)?),
        ("global", sc.plan.intervals()),
    ];
    variants
        .into_iter()
        .map(|(name, ivs)| {
            let (inv, rec) = round_trip(&sc, &ivs).at(Stage::Metrics)?;
            let report = stability_report(&inv, &rec, &sc.sources[0], cfg.metrics.psnr_peak).at(Stage::Metrics)?;
            let jumps = step_jumps(&rec);
            let boundary_jump = switches.iter().map(|&i| jumps[i]).fold(0.0, f64::max);
            Ok(BenchRow { variant: name.into(), report, boundary_jump })
        })
        .collect()
}
