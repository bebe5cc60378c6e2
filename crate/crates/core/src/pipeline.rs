//! Alignment, disentanglement and entanglement for a pair of sources, plus the
//! parallel batch runner.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::align::{align_intervals, AlignWarning, AlignedPair};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gating::{latent_blend, SpatialMask};
use crate::metrics::{psnr, stability_report, value_range, StabilityReport};
use crate::nulltext::{optimize_identity, EmbeddingSchedule, IdentityOutcome, NonConvergenceReport, ReconTargets};
use crate::predictor::{predict_x0, Embedding, GaussianOracle, GaussianOracleConfig, Latent, NoisePredictor};
use crate::sampler::{interval_update, Direction, Dpm2mState, DpmOrder, StepRecord, Trajectory};
use crate::schedule::{HybridPlan, NoiseSchedule};
use crate::toy::{region_indices, Region, ToyAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Align,
    Nulltext,
    Entangle,
    Metrics,
    Io,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Align => "align",
            Stage::Nulltext => "nulltext",
            Stage::Entangle => "entangle",
            Stage::Metrics => "metrics",
            Stage::Io => "io",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage} {error}")]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// Everything a run needs besides its knobs: oracles, sources and the plan.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub schedule: NoiseSchedule,
    pub plan: HybridPlan,
    pub order: DpmOrder,
    pub oracles: [GaussianOracle; 2],
    pub sources: [Latent; 2],
    pub conds: [Embedding; 2],
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Build the scenario a config describes. Synthetic sources share one
/// covariance and one embedding coupling; their means differ by
/// `separation·N(0, I)` and conditional embeddings are zero.
pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let plan = cfg.plan.build()?;
    let order = cfg.plan.order()?;
    let s = &cfg.sources;
    if let Some(e) = &s.explicit {
        let oracles = [
            GaussianOracle::new(e.oracle_1.clone(), schedule.clone())?,
            GaussianOracle::new(e.oracle_2.clone(), schedule.clone())?,
        ];
        return Ok(Scenario {
            schedule,
            plan,
            order,
            oracles,
            sources: [e.source_1.clone(), e.source_2.clone()],
            conds: [e.cond_1.clone(), e.cond_2.clone()],
        });
    }
    let d = s.side * s.side;
    let m = s.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mu1: Vec<f64> = normals(&mut rng, d).into_iter().map(|x| s.mean_scale * x).collect();
    let mu2: Vec<f64> = mu1.iter().zip(normals(&mut rng, d)).map(|(a, x)| a + s.separation * x).collect();
    let var: Vec<f64> = (0..d).map(|_| (s.sigma_scale * rng.gen_range(0.5..1.5)).powi(2)).collect();
    let scale = s.coupling_scale / (m.max(1) as f64).sqrt();
    let coupling: Vec<Vec<f64>> =
        (0..d).map(|_| normals(&mut rng, m).into_iter().map(|x| scale * x).collect()).collect();
    let x1: Vec<f64> = mu1.iter().zip(&var).zip(normals(&mut rng, d)).map(|((a, v), x)| a + v.sqrt() * x).collect();
    let x2: Vec<f64> = mu2.iter().zip(&var).zip(normals(&mut rng, d)).map(|((a, v), x)| a + v.sqrt() * x).collect();
    let oracle = |mu: Vec<f64>| {
        GaussianOracle::new(
            GaussianOracleConfig { mu, sigma_diag: var.clone(), embedding_coupling: coupling.clone() },
            schedule.clone(),
        )
    };
    let oracles = [oracle(mu1)?, oracle(mu2)?];
    Ok(Scenario { schedule, plan, order, oracles, sources: [x1, x2], conds: [vec![0.0; m], vec![0.0; m]] })
}

/// Aligned inversion followed by per-identity null-text optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub aligned: AlignedPair,
    pub identities: [IdentityOutcome; 2],
    pub reconstructions: [Trajectory; 2],
    pub stability: [StabilityReport; 2],
}

impl PairOutcome {
    pub fn min_psnr(&self) -> f64 {
        self.stability[0].psnr_db.min(self.stability[1].psnr_db)
    }
}

fn run_pair(cfg: &ExperimentConfig, sc: &Scenario, clock: &mut Clock) -> std::result::Result<PairOutcome, StageError> {
    let n = sc.plan.len();
    let intervals = sc.plan.intervals();
    let [p1, p2] = &sc.oracles;
    let inv = [
        EmbeddingSchedule::conditional_only(sc.conds[0].clone(), n),
        EmbeddingSchedule::conditional_only(sc.conds[1].clone(), n),
    ];
    let aligned = clock
        .time(Stage::Align, || {
            align_intervals(
                &intervals,
                &sc.schedule,
                [p1, p2],
                [&sc.sources[0], &sc.sources[1]],
                [&inv[0], &inv[1]],
                &cfg.align,
                sc.order,
            )
        })
        .at(Stage::Align)?;

    let targets = [
        ReconTargets::from_inversion(&aligned.traj_1).at(Stage::Nulltext)?,
        ReconTargets::from_inversion(&aligned.traj_2).at(Stage::Nulltext)?,
    ];
    let identities = clock
        .time(Stage::Nulltext, || {
            let run = |i: usize| {
                let pred: &dyn NoisePredictor = &sc.oracles[i];
                let (z, c) = (&aligned.z_shared, &sc.conds[i]);
                optimize_identity(&intervals, &sc.schedule, pred, z, &targets[i], c, c, &cfg.nulltext, sc.order)
            };
            let (a, b) = rayon::join(|| run(0), || run(1));
            Ok::<_, Error>([a?, b?])
        })
        .at(Stage::Nulltext)?;

    let replay = |i: usize| {
        crate::nulltext::reconstruct_intervals_with_null(
            &intervals,
            &sc.schedule,
            &sc.oracles[i],
            &aligned.z_shared,
            &identities[i].schedule,
            sc.order,
        )
    };
    let reconstructions = [replay(0).at(Stage::Nulltext)?, replay(1).at(Stage::Nulltext)?];
    let peak = cfg.metrics.psnr_peak;
    let stability = [
        stability_report(&aligned.traj_1, &reconstructions[0], &sc.sources[0], peak).at(Stage::Metrics)?,
        stability_report(&aligned.traj_2, &reconstructions[1], &sc.sources[1], peak).at(Stage::Metrics)?,
    ];
    Ok(PairOutcome { aligned, identities, reconstructions, stability })
}

/// Alignment and null-text stages only.
pub fn run_alignment_and_nulltext(cfg: &ExperimentConfig) -> std::result::Result<(Scenario, PairOutcome), StageError> {
    let sc = build_scenario(cfg).at(Stage::Config)?;
    let out = run_pair(cfg, &sc, &mut Clock::start())?;
    Ok((sc, out))
}

/// Region-wise distances of the target output to both reconstructions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionStat {
    pub region: String,
    pub pixels: usize,
    pub rmse_to_1: f64,
    pub rmse_to_2: f64,
    /// RMSE against the masked-copy reference.
    pub rmse_to_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub stage: Stage,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub z_shared: Latent,
    pub recon_1: Latent,
    pub recon_2: Latent,
    pub target: Latent,
    pub stability: [StabilityReport; 2],
    pub pair: PairOutcome,
    /// Trajectories of the three generation streams from the shared latent.
    pub streams: [Trajectory; 3],
    pub region_stats: Vec<RegionStat>,
    pub metrics: Vec<MetricRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    /// Seconds since the run started.
    pub started: f64,
    pub elapsed: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub outputs: PipelineOutputs,
    pub timings: Vec<StageTiming>,
    pub config_hash: String,
}

impl PipelineResult {
    /// CSV `stage,metric,value`.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("stage,metric,value\n");
        for r in &self.outputs.metrics {
            s.push_str(&format!("{},{},{}\n", r.stage, r.name, r.value));
        }
        s
    }

    pub fn summary(&self) -> String {
        let o = &self.outputs;
        let mut s = format!("config_hash {}\n", self.config_hash);
        for (i, r) in o.stability.iter().enumerate() {
            s.push_str(&format!("\n[identity {}]\n{}", i + 1, r.summary()));
        }
        s.push_str(&format!("\nmerge step {}\n", o.pair.aligned.merge_step));
        if !o.region_stats.is_empty() {
            s.push_str("\nregion            pixels  rmse_to_1  rmse_to_2  rmse_to_ref\n");
            for r in &o.region_stats {
                s.push_str(&format!(
                    "{:<16} {:>7} {:>10.4} {:>10.4} {:>12.4}\n",
                    r.region, r.pixels, r.rmse_to_1, r.rmse_to_2, r.rmse_to_reference
                ));
            }
        }
        s.push_str("\nstage      started_s   elapsed_s\n");
        for t in &self.timings {
            s.push_str(&format!("{:<10} {:>9.4} {:>11.4}\n", t.stage.to_string(), t.started, t.elapsed));
        }
        for w in &o.warnings {
            s.push_str(&format!("warning {w}\n"));
        }
        s
    }
}

struct Clock {
    origin: Instant,
    timings: Vec<StageTiming>,
}

impl Clock {
    fn start() -> Self {
        Self { origin: Instant::now(), timings: Vec::new() }
    }

    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            stage,
            started: (start - self.origin).as_secs_f64(),
            elapsed: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// Masks and toy substrate for the target stream.
struct Entangler {
    toy: ToyAttention,
    policy: crate::gating::LayerPolicy,
    weights: crate::toy::LayerWeights,
}

/// Generate the three streams from the shared latent. The target stream uses
/// source 1's predictor and conditional embedding, nulls mixed from both
/// identities, and gated data estimates when gating is enabled.
fn generate_streams(
    cfg: &ExperimentConfig,
    sc: &Scenario,
    z_shared: &[f64],
    embs: [&EmbeddingSchedule; 2],
    entangler: Option<&Entangler>,
    blend: Option<&SpatialMask>,
) -> Result<[Trajectory; 3]> {
    let intervals = sc.plan.intervals();
    let n = intervals.len();
    let mix = cfg.entangle.target_null_mix;
    let nulls_3: Vec<Embedding> = (0..n)
        .map(|i| {
            if mix == 0.0 {
                embs[0].nulls[i].clone()
            } else {
                embs[0].nulls[i].iter().zip(&embs[1].nulls[i]).map(|(a, b)| (1.0 - mix) * a + mix * b).collect()
            }
        })
        .collect();
    let emb_3 = EmbeddingSchedule { nulls: nulls_3, ..embs[0].clone() };
    let embs = [embs[0], embs[1], &emb_3];
    let preds: [&dyn NoisePredictor; 3] = [&sc.oracles[0], &sc.oracles[1], &sc.oracles[0]];
    let guided: Vec<_> = (0..3).map(|s| embs[s].guided(preds[s])).collect();

    let mut z = [z_shared.to_vec(), z_shared.to_vec(), z_shared.to_vec()];
    let mut states = [Dpm2mState::new(sc.order), Dpm2mState::new(sc.order), Dpm2mState::new(sc.order)];
    let mut records: [Vec<StepRecord>; 3] = Default::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb1e9_d000);

    for (i, iv) in intervals.iter().enumerate() {
        let x0: Vec<Latent> = (0..3)
            .into_par_iter()
            .map(|s| {
                let eps = guided[s].eps(&z[s], iv.from, &embs[s].nulls[i])?;
                predict_x0(&sc.schedule, &z[s], iv.from, &eps)
            })
            .collect::<Result<_>>()?;
        let mut x0: [Latent; 3] = x0.try_into().expect("three streams");
        if let Some(e) = entangler {
            x0[2] = e.toy.gate(&e.policy, &e.weights, &cfg.entangle.gating, [&x0[0], &x0[1], &x0[2]])?;
        }
        for s in 0..3 {
            let (mut zn, st) = interval_update(&sc.schedule, iv, &z[s], &x0[s], &states[s])?;
            if s == 2 {
                if let Some(mask) = blend {
                    let noise = normals(&mut rng, zn.len());
                    zn = latent_blend(&zn, &sc.sources[0], mask, iv.to, &sc.schedule, &noise)?;
                }
            }
            records[s].push(StepRecord {
                step_index: i,
                timestep: iv.from,
                solver_tag: iv.solver,
                latent_before: std::mem::replace(&mut z[s], zn.clone()),
                latent_after: zn,
                x0_estimate: std::mem::take(&mut x0[s]),
            });
            states[s] = st;
        }
    }
    Ok(records.map(|steps| Trajectory { direction: Direction::Reconstruction, steps, intervals: intervals.clone() }))
}

fn rmse_over(a: &[f64], b: &[f64], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    (idx.iter().map(|&j| (a[j] - b[j]).powi(2)).sum::<f64>() / idx.len() as f64).sqrt()
}

/// Masked-copy reference: source 1 in its exclusive region and outside both
/// masks, source 2 in its exclusive region, the `ŵ` blend in the overlap.
pub fn masked_reference(r1: &[f64], r2: &[f64], m1: &SpatialMask, m2: &SpatialMask, w_hat: f64) -> Vec<f64> {
    (0..r1.len())
        .map(|j| match crate::toy::region_of(m1, m2, j) {
            Region::OnlySecond => r2[j],
            Region::Both => w_hat * r1[j] + (1.0 - w_hat) * r2[j],
            Region::OnlyFirst | Region::Neither => r1[j],
        })
        .collect()
}

fn warning_text(w: &AlignWarning) -> String {
    match w {
        AlignWarning::NonConvergence { step, lambda } => format!("align non_convergence step={step} lambda={lambda}"),
        AlignWarning::NonMonotoneLoss { step, previous, current } => {
            format!("align non_monotone_loss step={step} previous={previous:e} current={current:e}")
        }
    }
}

fn report_text(identity: usize, r: &NonConvergenceReport) -> String {
    format!("nulltext non_convergence identity={identity} step={} residual={:e}", r.step, r.residual)
}

/// Full run for one pair of sources.
pub fn run_editedid(cfg: &ExperimentConfig) -> std::result::Result<PipelineResult, StageError> {
    let mut clock = Clock::start();
    let sc = clock.time(Stage::Config, || build_scenario(cfg)).at(Stage::Config)?;
    let config_hash = cfg.hash();
    let side = cfg.sources.side;

    let pair = run_pair(cfg, &sc, &mut clock)?;

    let ent = &cfg.entangle;
    let z_shared = pair.aligned.z_shared.clone();
    let (masks, streams) = clock
        .time(Stage::Entangle, || -> Result<_> {
            let masks = match ent.enabled {
                true => Some((ent.mask_1.build(side, None)?, ent.mask_2.build(side, None)?)),
                false => None,
            };
            let entangler = match &masks {
                Some((m1, m2)) => {
                    let toy = ToyAttention::new(side, ent.toy.clone(), cfg.seed)?;
                    let policy = toy.policy(&ent.gating);
                    let weights = toy.layer_weights(m1, m2, &ent.gating)?;
                    Some(Entangler { toy, policy, weights })
                }
                None => None,
            };
            let blend = ent.blend_mask.as_ref().map(|spec| spec.build(side, None)).transpose()?;
            let streams = generate_streams(
                cfg,
                &sc,
                &z_shared,
                [&pair.identities[0].schedule, &pair.identities[1].schedule],
                entangler.as_ref(),
                blend.as_ref(),
            )?;
            Ok((masks, streams))
        })
        .at(Stage::Entangle)?;

    let finals: Vec<Latent> = streams.iter().map(|t| t.final_latent().expect("non-empty plan").clone()).collect();
    let (metrics, region_stats) = clock
        .time(Stage::Metrics, || -> Result<(Vec<MetricRow>, Vec<RegionStat>)> {
            let mut rows = Vec::new();
            let mut push = |stage, name: &str, value| rows.push(MetricRow { stage, name: name.into(), value });
            push(Stage::Align, "merge_step", pair.aligned.merge_step as f64);
            push(Stage::Align, "final_lambda", *pair.aligned.lambda_history.last().unwrap_or(&0.0));
            for (i, id) in pair.identities.iter().enumerate() {
                let worst = id.residuals.iter().cloned().fold(0.0, f64::max);
                push(Stage::Nulltext, &format!("max_residual_{}", i + 1), worst);
            }
            for (i, r) in pair.stability.iter().enumerate() {
                push(Stage::Metrics, &format!("psnr_{}", i + 1), r.psnr_db);
                push(Stage::Metrics, &format!("cumulative_mse_{}", i + 1), r.cumulative_mse);
                push(Stage::Metrics, &format!("max_jump_{}", i + 1), r.max_jump);
                push(Stage::Metrics, &format!("final_l2_{}", i + 1), r.final_l2);
            }
            let peak = cfg.metrics.psnr_peak.unwrap_or_else(|| value_range(&sc.sources[0]));
            push(Stage::Entangle, "psnr_target_vs_1", psnr(&finals[2], &finals[0], peak)?);
            let mut stats = Vec::new();
            if let Some((m1, m2)) = &masks {
                let reference = masked_reference(&finals[0], &finals[1], m1, m2, ent.gating.w_hat);
                for (region, name) in [
                    (Region::OnlyFirst, "only_1"),
                    (Region::OnlySecond, "only_2"),
                    (Region::Both, "overlap"),
                    (Region::Neither, "outside"),
                ] {
                    let idx = region_indices(m1, m2, region);
                    stats.push(RegionStat {
                        region: name.into(),
                        pixels: idx.len(),
                        rmse_to_1: rmse_over(&finals[2], &finals[0], &idx),
                        rmse_to_2: rmse_over(&finals[2], &finals[1], &idx),
                        rmse_to_reference: rmse_over(&finals[2], &reference, &idx),
                    });
                }
                for s in &stats {
                    push(Stage::Entangle, &format!("rmse_{}_to_1", s.region), s.rmse_to_1);
                    push(Stage::Entangle, &format!("rmse_{}_to_2", s.region), s.rmse_to_2);
                }
            }
            Ok((rows, stats))
        })
        .at(Stage::Metrics)?;

    let mut warnings: Vec<String> = pair.aligned.warnings.iter().map(warning_text).collect();
    for (i, id) in pair.identities.iter().enumerate() {
        warnings.extend(id.reports.iter().map(|r| report_text(i + 1, r)));
    }

    let [f1, f2, f3]: [Latent; 3] = finals.try_into().expect("three streams");
    let stability = pair.stability;
    Ok(PipelineResult {
        outputs: PipelineOutputs {
            z_shared,
            recon_1: f1,
            recon_2: f2,
            target: f3,
            stability,
            pair,
            streams,
            region_stats,
            metrics,
            warnings,
        },
        timings: clock.timings,
        config_hash,
    })
}

/// Run independent configs on a pool of `workers` threads. Results keep input
/// order; a failing item never affects the others.
pub fn run_parallel_batch(
    configs: &[ExperimentConfig],
    workers: usize,
) -> Result<Vec<std::result::Result<PipelineResult, StageError>>> {
    if workers == 0 {
        return Err(Error::InvalidRange("workers must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| Error::Io(e.to_string()))?;
    Ok(pool.install(|| configs.par_iter().map(run_editedid).collect()))
}
