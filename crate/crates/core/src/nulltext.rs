//! Per-step null embeddings that pin reconstructions to aligned inversion states.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::predictor::{
    dot, embedding_gradient, predict_x0, Embedding, GradientMethod, Guided, Latent, NoisePredictor,
};
use crate::sampler::{
    interval_coeffs, reconstruct_interval, run_intervals, Direction, Dpm2mState, DpmOrder, Trajectory,
};
use crate::schedule::{HybridPlan, Interval, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Fixed learning rate, halved until the loss decreases.
    #[default]
    Fixed,
    /// Exact minimizer of the local quadratic model along the gradient,
    /// halved until the loss decreases.
    Exact,
}

impl FromStr for StepRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(StepRule::Fixed),
            "exact" => Ok(StepRule::Exact),
            other => Err(Error::Parse(format!("unknown step rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NullTextConfig {
    pub iterations: usize,
    pub lr: f64,
    pub early_stop: f64,
    pub step_rule: StepRule,
    pub gradient: GradientMethod,
    /// Classifier-free weight `w`; `0` follows the null path only.
    pub guidance: f64,
}

impl Default for NullTextConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            lr: 0.1,
            early_stop: 1e-6,
            step_rule: StepRule::Fixed,
            gradient: GradientMethod::Auto,
            guidance: 0.0,
        }
    }
}

/// Fixed conditional embedding plus one null embedding per reconstruction step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSchedule {
    pub conditional: Embedding,
    pub nulls: Vec<Embedding>,
    pub guidance: f64,
    pub optimizer: NullTextConfig,
    /// Fingerprint of the intervals the nulls were optimized on.
    pub plan_fingerprint: Option<String>,
}

pub fn plan_fingerprint(intervals: &[Interval]) -> String {
    let mut h = Sha256::new();
    for iv in intervals {
        h.update(iv.from.to_bits().to_le_bytes());
        h.update(iv.to.to_bits().to_le_bytes());
        h.update([iv.solver as u8]);
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!(" {x}")).collect()
}

fn parse_vec(fields: &[&str]) -> Result<Vec<f64>> {
    fields.iter().map(|f| f.parse::<f64>().map_err(|e| Error::Parse(format!("{f:?}: {e}")))).collect()
}

impl EmbeddingSchedule {
    pub fn uniform(conditional: Embedding, null: Embedding, steps: usize, guidance: f64) -> Self {
        Self {
            conditional,
            nulls: vec![null; steps],
            guidance,
            optimizer: NullTextConfig { guidance, ..Default::default() },
            plan_fingerprint: None,
        }
    }

    /// Every step predicts with the conditional embedding.
    pub fn conditional_only(conditional: Embedding, steps: usize) -> Self {
        Self::uniform(conditional.clone(), conditional, steps, 0.0)
    }

    pub fn guided<'a>(&'a self, pred: &'a dyn NoisePredictor) -> Guided<'a> {
        Guided { inner: pred, cond: &self.conditional, weight: self.guidance }
    }

    /// Line-oriented text form; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let o = &self.optimizer;
        let mut s = String::from("editedid-embeddings 1\n");
        s.push_str(&format!("guidance {}\n", self.guidance));
        s.push_str(&format!(
            "optimizer {} {} {} {} {}\n",
            o.iterations,
            o.lr,
            o.early_stop,
            match o.step_rule {
                StepRule::Fixed => "fixed",
                StepRule::Exact => "exact",
            },
            match o.gradient {
                GradientMethod::Auto => "auto",
                GradientMethod::FiniteDifference => "finite_difference",
            }
        ));
        if let Some(fp) = &self.plan_fingerprint {
            s.push_str(&format!("plan {fp}\n"));
        }
        s.push_str(&format!("cond{}\n", join(&self.conditional)));
        for (i, n) in self.nulls.iter().enumerate() {
            s.push_str(&format!("null {i}{}\n", join(n)));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("editedid-embeddings 1") {
            return Err(Error::Parse("missing embedding schedule header".into()));
        }
        let mut out = Self::uniform(Vec::new(), Vec::new(), 0, 0.0);
        let mut seen_cond = false;
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f[0] {
                "guidance" if f.len() == 2 => out.guidance = parse_vec(&f[1..])?[0],
                "optimizer" if f.len() == 6 => {
                    out.optimizer = NullTextConfig {
                        iterations: f[1].parse().map_err(|e| Error::Parse(format!("{e}")))?,
                        lr: parse_vec(&f[2..3])?[0],
                        early_stop: parse_vec(&f[3..4])?[0],
                        step_rule: f[4].parse()?,
                        gradient: match f[5] {
                            "auto" => GradientMethod::Auto,
                            "finite_difference" => GradientMethod::FiniteDifference,
                            g => return Err(Error::Parse(format!("unknown gradient {g:?}"))),
                        },
                        guidance: out.guidance,
                    }
                }
                "plan" if f.len() == 2 => out.plan_fingerprint = Some(f[1].to_string()),
                "cond" => {
                    out.conditional = parse_vec(&f[1..])?;
                    seen_cond = true;
                }
                "null" if f.len() >= 2 => {
                    let idx: usize = f[1].parse().map_err(|e| Error::Parse(format!("{e}")))?;
                    if idx != out.nulls.len() {
                        return Err(Error::Parse(format!("null index {idx} out of sequence")));
                    }
                    out.nulls.push(parse_vec(&f[2..])?);
                }
                _ => return Err(Error::Parse(format!("unrecognized line {line:?}"))),
            }
        }
        if !seen_cond {
            return Err(Error::Parse("missing cond line".into()));
        }
        out.optimizer.guidance = out.guidance;
        Ok(out)
    }
}

/// Aligned latents a reconstruction must hit: `levels[i]` after step `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconTargets {
    pub levels: Vec<Latent>,
}

impl ReconTargets {
    /// Read targets off an inversion trajectory: reconstruction step `i` must
    /// land where inversion stood before it crossed interval `i`.
    pub fn from_inversion(inv: &Trajectory) -> Result<Self> {
        if inv.direction != Direction::Inversion {
            return Err(Error::PlanMismatch("targets need an inversion trajectory".into()));
        }
        let n = inv.steps.len();
        let mut levels = vec![Vec::new(); n];
        for r in &inv.steps {
            levels[r.step_index] = r.latent_before.clone();
        }
        Ok(Self { levels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonConvergenceReport {
    pub step: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityOutcome {
    pub schedule: EmbeddingSchedule,
    /// Achieved `‖target − step(∅)‖²` per step.
    pub residuals: Vec<f64>,
    /// Loss after each accepted inner iteration, starting with the initial loss.
    pub loss_traces: Vec<Vec<f64>>,
    pub reports: Vec<NonConvergenceReport>,
    pub final_latent: Latent,
}

impl IdentityOutcome {
    pub fn require_converged(&self) -> Result<()> {
        match self.reports.first() {
            Some(r) => Err(Error::NonConvergence { step: r.step, residual: r.residual }),
            None => Ok(()),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gradient descent on `∅` for every step of one identity, warm-starting each
/// step from the previous optimum and starting from `init_null`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_identity(
    intervals: &[Interval],
    schedule: &NoiseSchedule,
    pred: &dyn NoisePredictor,
    z_start: &[f64],
    targets: &ReconTargets,
    cond: &[f64],
    init_null: &[f64],
    cfg: &NullTextConfig,
    order: DpmOrder,
) -> Result<IdentityOutcome> {
    let n = intervals.len();
    if targets.levels.len() != n {
        return Err(Error::PlanMismatch(format!("{} targets for {n} steps", targets.levels.len())));
    }
    check_dim(pred.dim(), z_start.len())?;
    check_dim(pred.embed_dim(), cond.len())?;
    check_dim(pred.embed_dim(), init_null.len())?;
    let guided = Guided { inner: pred, cond, weight: cfg.guidance };

    let mut z = z_start.to_vec();
    let mut state = Dpm2mState::new(order);
    let mut null = init_null.to_vec();
    let mut nulls = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    let mut reports = Vec::new();

    for (i, iv) in intervals.iter().enumerate() {
        let target = &targets.levels[i];
        check_dim(z.len(), target.len())?;
        let coeffs = interval_coeffs(schedule, iv, &state)?;
        let prev = state.prev.as_ref().map(|(p, _)| p.as_slice());
        let a = schedule.alpha_bar(iv.from);
        // ∂z_next/∂ε, a scalar because both solvers are affine in x̃⁰.
        let kappa = -coeffs.cx * (1.0 - a).max(0.0).sqrt() / a.sqrt();

        let eval = |e: &[f64]| -> Result<(Latent, f64)> {
            let eps = guided.eps(&z, iv.from, e)?;
            let x0 = predict_x0(schedule, &z, iv.from, &eps)?;
            let zn = coeffs.apply(&z, &x0, prev);
            let loss = sq_dist(target, &zn);
            Ok((zn, loss))
        };

        let (mut zn, mut loss) = eval(&null)?;
        let mut trace = vec![loss];
        for _ in 0..cfg.iterations {
            if loss <= cfg.early_stop || kappa == 0.0 {
                break;
            }
            let adjoint: Vec<f64> = target.iter().zip(&zn).map(|(t, v)| -2.0 * kappa * (t - v)).collect();
            let g = embedding_gradient(&guided, &z, iv.from, &null, &adjoint, cfg.gradient)?;
            let gnorm2 = dot(&g, &g);
            if gnorm2 == 0.0 {
                break;
            }
            let mut alpha = match cfg.step_rule {
                StepRule::Fixed => cfg.lr,
                StepRule::Exact => {
                    let jg = directional(&guided, &z, iv.from, &null, &g, cfg.gradient)?;
                    let jg2 = kappa * kappa * dot(&jg, &jg);
                    if jg2 == 0.0 {
                        break;
                    }
                    // ⟨r, J g⟩ = −½‖g‖², so the model minimizer is ‖g‖²/(2‖J g‖²).
                    gnorm2 / (2.0 * jg2)
                }
            };
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> = null.iter().zip(&g).map(|(e, gi)| e - alpha * gi).collect();
                let (czn, closs) = eval(&cand)?;
                if closs < loss {
                    null = cand;
                    zn = czn;
                    loss = closs;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            trace.push(loss);
        }

        let out = reconstruct_interval(schedule, &guided, iv, &z, &null, &state)?;
        let residual = sq_dist(target, &out.z);
        if residual > cfg.early_stop {
            reports.push(NonConvergenceReport { step: i, residual });
        }
        residuals.push(residual);
        traces.push(trace);
        nulls.push(null.clone());
        z = out.z;
        state = out.state;
    }

    Ok(IdentityOutcome {
        schedule: EmbeddingSchedule {
            conditional: cond.to_vec(),
            nulls,
            guidance: cfg.guidance,
            optimizer: *cfg,
            plan_fingerprint: Some(plan_fingerprint(intervals)),
        },
        residuals,
        loss_traces: traces,
        reports,
        final_latent: z,
    })
}

fn directional(
    pred: &dyn NoisePredictor,
    z: &[f64],
    t: f64,
    e: &[f64],
    v: &[f64],
    method: GradientMethod,
) -> Result<Latent> {
    if method == GradientMethod::Auto {
        if let Some(d) = pred.eps_grad_embedding(z, t, e, v) {
            return d;
        }
    }
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let h = crate::predictor::DEFAULT_FD_STEP / scale;
    let up: Vec<f64> = e.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let down: Vec<f64> = e.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let (eu, ed) = (pred.eps(z, t, &up)?, pred.eps(z, t, &down)?);
    Ok(eu.iter().zip(ed).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Optimize both identities' null embeddings over one shared plan. Each
/// identity starts from its conditional embedding.
pub fn optimize_null_embeddings(
    plan: &HybridPlan,
    schedule: &NoiseSchedule,
    preds: [&dyn NoisePredictor; 2],
    z_shared: &[f64],
    targets: [&ReconTargets; 2],
    conds: [&[f64]; 2],
    cfg: &NullTextConfig,
) -> Result<[IdentityOutcome; 2]> {
    let intervals = plan.intervals();
    let run = |i: usize| {
        optimize_identity(
            &intervals,
            schedule,
            preds[i],
            z_shared,
            targets[i],
            conds[i],
            conds[i],
            cfg,
            DpmOrder::Second,
        )
    };
    let (a, b) = rayon::join(|| run(0), || run(1));
    Ok([a?, b?])
}

/// Replay a reconstruction under optimized nulls; the schedule must come from
/// the same plan.
pub fn reconstruct_with_null(
    plan: &HybridPlan,
    schedule: &NoiseSchedule,
    pred: &dyn NoisePredictor,
    z_shared: &[f64],
    emb: &EmbeddingSchedule,
) -> Result<Trajectory> {
    reconstruct_intervals_with_null(&plan.intervals(), schedule, pred, z_shared, emb, DpmOrder::Second)
}

pub fn reconstruct_intervals_with_null(
    intervals: &[Interval],
    schedule: &NoiseSchedule,
    pred: &dyn NoisePredictor,
    z_shared: &[f64],
    emb: &EmbeddingSchedule,
    order: DpmOrder,
) -> Result<Trajectory> {
    if emb.nulls.len() != intervals.len() {
        return Err(Error::PlanMismatch(format!("{} nulls for a plan of {} steps", emb.nulls.len(), intervals.len())));
    }
    if let Some(fp) = &emb.plan_fingerprint {
        if *fp != plan_fingerprint(intervals) {
            return Err(Error::PlanMismatch("embeddings were optimized on a different plan".into()));
        }
    }
    run_intervals(intervals, schedule, pred, z_shared, emb, Direction::Reconstruction, order)
}
