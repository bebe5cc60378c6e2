//! Structured experiment configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::gating::{GatingConfig, SpatialMask, TOKEN_COUNT};
use crate::nulltext::{NullTextConfig, StepRule};
use crate::predictor::GaussianOracleConfig;
use crate::sampler::DpmOrder;
use crate::schedule::{hybrid_grid, HybridPlan, IndexConvention, NoiseSchedule};

pub const SEED_ENV: &str = "EDITEDID_SEED";

/// Largest seed a TOML integer can hold.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 1000, beta_start: 0.00085, beta_end: 0.012 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub steps: usize,
    pub s1: usize,
    pub s2: usize,
    pub convention: IndexConvention,
    pub dpm_order: u8,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { steps: 6, s1: 1, s2: 3, convention: IndexConvention::FromData, dpm_order: 2 }
    }
}

impl PlanConfig {
    pub fn build(&self) -> Result<HybridPlan> {
        hybrid_grid(self.steps, self.s1, self.s2, self.convention)
    }

    pub fn order(&self) -> Result<DpmOrder> {
        DpmOrder::from_int(self.dpm_order)
    }
}

/// Synthetic Gaussian sources on a `side×side` latent grid, or explicit ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub side: usize,
    pub embed_dim: usize,
    pub mean_scale: f64,
    /// Scale of the per-pixel mean offset between the two sources.
    pub separation: f64,
    /// Per-pixel standard deviations are `sigma_scale·U(0.5, 1.5)`.
    pub sigma_scale: f64,
    pub coupling_scale: f64,
    pub explicit: Option<ExplicitSources>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            side: 16,
            embed_dim: 192,
            mean_scale: 1.0,
            separation: 3.0,
            sigma_scale: 0.2,
            coupling_scale: 1.0,
            explicit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitSources {
    pub oracle_1: GaussianOracleConfig,
    pub oracle_2: GaussianOracleConfig,
    pub source_1: Vec<f64>,
    pub source_2: Vec<f64>,
    pub cond_1: Vec<f64>,
    pub cond_2: Vec<f64>,
}

/// Mask geometry in fractions of the grid, or a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    Rect { rows: (f64, f64), cols: (f64, f64) },
    Ellipse { center: (f64, f64), radii: (f64, f64) },
    Text { path: String },
    Pgm { path: String },
    Full,
    Empty,
}

impl MaskSpec {
    pub fn face() -> Self {
        MaskSpec::Ellipse { center: (0.5, 0.5), radii: (0.4, 0.32) }
    }

    pub fn glasses() -> Self {
        MaskSpec::Rect { rows: (0.3, 0.5), cols: (0.0, 1.0) }
    }

    /// Materialize at `side×side`; file masks are resampled to fit.
    pub fn build(&self, side: usize, base_dir: Option<&Path>) -> Result<SpatialMask> {
        let s = side as f64;
        let idx = |f: f64| ((f * s).round().max(0.0) as usize).min(side);
        let resolve = |p: &str| match base_dir {
            Some(b) if Path::new(p).is_relative() => b.join(p),
            _ => Path::new(p).to_path_buf(),
        };
        let read = |p: &str| {
            let path = resolve(p);
            std::fs::read(&path)
                .map_err(|e| Error::Config { key: "mask".into(), message: format!("{}: {e}", path.display()) })
        };
        let mask = match self {
            MaskSpec::Rect { rows, cols } => {
                SpatialMask::rect(side, side, idx(rows.0), idx(rows.1), idx(cols.0), idx(cols.1))?
            }
            MaskSpec::Ellipse { center, radii } => {
                SpatialMask::ellipse(side, side, center.0 * s, center.1 * s, radii.0 * s, radii.1 * s)?
            }
            MaskSpec::Text { path } => SpatialMask::from_text(&String::from_utf8_lossy(&read(path)?))?,
            MaskSpec::Pgm { path } => SpatialMask::from_pgm(&read(path)?)?,
            MaskSpec::Full => SpatialMask::filled(side, side, 1.0)?,
            MaskSpec::Empty => SpatialMask::filled(side, side, 0.0)?,
        };
        mask.resample(side, side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntangleConfig {
    pub enabled: bool,
    #[serde(flatten)]
    pub gating: GatingConfig,
    pub mask_1: MaskSpec,
    pub mask_2: MaskSpec,
    /// Optional edit region; outside it the target is re-noised from source 1.
    pub blend_mask: Option<MaskSpec>,
    /// Target nulls are `(1−mix)·∅₁ + mix·∅₂`.
    pub target_null_mix: f64,
    pub toy: ToyAttentionConfig,
}

impl Default for EntangleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gating: GatingConfig { tokens_1: vec![2], tokens_2: vec![5], ..GatingConfig::default() },
            mask_1: MaskSpec::face(),
            mask_2: MaskSpec::glasses(),
            blend_mask: None,
            target_null_mix: 0.0,
            toy: ToyAttentionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyAttentionConfig {
    /// Spatial length scale of self-attention, in pixels of the layer grid.
    pub length_scale: f64,
    /// Temperature on squared value differences in self-attention.
    pub value_temperature: f64,
    /// Scale of the seeded logit perturbation.
    pub jitter: f64,
    /// Weight of the cross-attention contribution.
    pub cross_gain: f64,
    pub tokens: usize,
}

impl Default for ToyAttentionConfig {
    fn default() -> Self {
        Self { length_scale: 0.6, value_temperature: 1.0, jitter: 0.1, cross_gain: 0.05, tokens: TOKEN_COUNT }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// PSNR peak; defaults to each source's value range.
    pub psnr_peak: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub plan: PlanConfig,
    pub align: AlignConfig,
    pub nulltext: NullTextConfig,
    pub sources: SourceConfig,
    pub entangle: EntangleConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            plan: PlanConfig::default(),
            align: AlignConfig::default(),
            nulltext: NullTextConfig { iterations: 500, step_rule: StepRule::Exact, ..NullTextConfig::default() },
            sources: SourceConfig::default(),
            entangle: EntangleConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Read a config file; relative mask paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let e = &mut cfg.entangle;
        for spec in [Some(&mut e.mask_1), Some(&mut e.mask_2), e.blend_mask.as_mut()].into_iter().flatten() {
            if let MaskSpec::Text { path } | MaskSpec::Pgm { path } = spec {
                if Path::new(path.as_str()).is_relative() {
                    *path = base.join(path.as_str()).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    /// Apply the `EDITEDID_SEED` override when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .ok()
                .filter(|&s| s <= MAX_SEED)
                .ok_or_else(|| invalid("seed", format!("{SEED_ENV}={v:?} is not an integer in 0..={MAX_SEED}")))?;
        }
        Ok(self)
    }

    /// Every field materialized, defaults included. Panics when `seed`
    /// exceeds [`MAX_SEED`], which `validate` rejects.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dim(&self) -> usize {
        match &self.sources.explicit {
            Some(e) => e.source_1.len(),
            None => self.sources.side * self.sources.side,
        }
    }

    /// Check cross-module preconditions, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.seed > MAX_SEED {
            return Err(invalid("seed", format!("must not exceed {MAX_SEED}")));
        }
        self.schedule.build().map_err(|e| invalid("schedule", e.to_string()))?;
        self.plan.build().map_err(|e| invalid("plan", e.to_string()))?;
        self.plan.order().map_err(|e| invalid("plan.dpm_order", e.to_string()))?;
        if !(0.0..=0.5).contains(&self.align.init_lambda) {
            return Err(invalid("align.init_lambda", "must lie in [0, 0.5]"));
        }
        if !(self.align.eta > 0.0) {
            return Err(invalid("align.eta", "must be positive"));
        }
        if !(self.nulltext.lr > 0.0) {
            return Err(invalid("nulltext.lr", "must be positive"));
        }
        let s = &self.sources;
        match &s.explicit {
            Some(e) => {
                for (k, o) in [("sources.explicit.oracle_1", &e.oracle_1), ("sources.explicit.oracle_2", &e.oracle_2)] {
                    o.validate().map_err(|err| invalid(k, err.to_string()))?;
                }
                let d = e.source_1.len();
                if e.source_2.len() != d || e.oracle_1.mu.len() != d || e.oracle_2.mu.len() != d {
                    return Err(invalid("sources.explicit", "sources and oracles must share one dimension"));
                }
                if s.side * s.side != d && self.entangle.enabled {
                    return Err(invalid("sources.side", format!("side² must equal the latent dimension {d}")));
                }
            }
            None => {
                if s.side < 2 {
                    return Err(invalid("sources.side", "must be at least 2"));
                }
                if !(s.sigma_scale > 0.0) {
                    return Err(invalid("sources.sigma_scale", "must be positive"));
                }
            }
        }
        if self.entangle.enabled {
            self.entangle
                .gating
                .validate(self.entangle.toy.tokens)
                .map_err(|e| invalid("entangle.tokens", e.to_string()))?;
            if !(0.0..=1.0).contains(&self.entangle.target_null_mix) {
                return Err(invalid("entangle.target_null_mix", "must lie in [0, 1]"));
            }
            if self.entangle.toy.tokens == 0 {
                return Err(invalid("entangle.toy.tokens", "must be positive"));
            }
        }
        Ok(())
    }
}
