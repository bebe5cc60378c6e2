//! Attention gating: region weights from two masks, mask-selective
//! self-attention fusion, token-selective cross-attention replacement, the
//! per-layer policy and the latent blend.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::predictor::Latent;
use crate::schedule::NoiseSchedule;

pub const TOKEN_COUNT: usize = 77;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SpatialMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dim(height * width, values.len())?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRange(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Axis-aligned rectangle of ones, rows `r0..r1`, columns `c0..c1`.
    pub fn rect(height: usize, width: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Self> {
        let mut v = vec![0.0; height * width];
        for r in r0..r1.min(height) {
            for c in c0..c1.min(width) {
                v[r * width + c] = 1.0;
            }
        }
        Self::new(height, width, v)
    }

    /// Filled ellipse centered at `(cr, cc)` with radii `(rr, rc)` in pixels.
    pub fn ellipse(height: usize, width: usize, cr: f64, cc: f64, rr: f64, rc: f64) -> Result<Self> {
        let mut v = vec![0.0; height * width];
        for r in 0..height {
            for c in 0..width {
                let dr = (r as f64 + 0.5 - cr) / rr;
                let dc = (c as f64 + 0.5 - cc) / rc;
                if dr * dr + dc * dc <= 1.0 {
                    v[r * width + c] = 1.0;
                }
            }
        }
        Self::new(height, width, v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// Nearest-neighbor resampling; binary masks stay binary via a 0.5 threshold.
    pub fn resample(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        if height == 0 || width == 0 || self.is_empty() {
            return Err(Error::InvalidRange("cannot resample to or from an empty mask".into()));
        }
        let binary = self.is_binary();
        let mut v = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = (((r as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for c in 0..width {
                let sc = (((c as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                let x = self.values[sr * self.width + sc];
                v.push(if binary { f64::from(u8::from(x >= 0.5)) } else { x });
            }
        }
        Self::new(height, width, v)
    }

    /// Elementwise product.
    pub fn intersect(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Self::new(self.height, self.width, self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect())
    }

    /// `a + b − ab`.
    pub fn union(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Self::new(self.height, self.width, self.values.iter().zip(&other.values).map(|(a, b)| a + b - a * b).collect())
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::DimensionMismatch { expected: self.len(), got: other.len() });
        }
        Ok(())
    }

    /// Parse a whitespace-separated grid of values, one row per line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let width = rows.first().map_or(0, Vec::len);
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Parse("mask rows must be non-empty and equally long".into()));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    /// Parse a PGM image (`P2` or `P5`, 8-bit); gray levels scale to `[0, 1]`.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("truncated PGM header".into()));
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("PGM header {s:?}: {e}")));
        let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
        }
        let n = width * height;
        let raw: Vec<usize> = match tokens[0].as_str() {
            "P2" => {
                let body = String::from_utf8_lossy(&bytes[pos..]);
                body.split_whitespace().take(n).map(num).collect::<Result<_>>()?
            }
            "P5" => {
                let data = bytes.get(pos + 1..pos + 1 + n).ok_or_else(|| Error::Parse("truncated PGM data".into()))?;
                data.iter().map(|b| *b as usize).collect()
            }
            m => return Err(Error::Parse(format!("unsupported PGM magic {m:?}"))),
        };
        check_dim(n, raw.len())?;
        Self::new(height, width, raw.into_iter().map(|v| v.min(maxval) as f64 / maxval as f64).collect())
    }
}

/// Dense `N×N` row-stochastic matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttnMap {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SelfAttnMap {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(n * n, data.len())?;
        Ok(Self { n, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `S·v`.
    pub fn apply(&self, v: &[f64]) -> Result<Latent> {
        check_dim(self.n, v.len())?;
        Ok((0..self.n).map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect())
    }
}

/// Dense `N×L` row-stochastic matrix, row-major; column `c` is token `c`'s map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttnMap {
    pub n: usize,
    pub tokens: usize,
    pub data: Vec<f64>,
}

impl CrossAttnMap {
    pub fn new(n: usize, tokens: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(n * tokens, data.len())?;
        Ok(Self { n, tokens, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.tokens + col]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, c)).collect()
    }

    /// `A·values`, one value per token.
    pub fn apply(&self, values: &[f64]) -> Result<Latent> {
        check_dim(self.tokens, values.len())?;
        Ok((0..self.n)
            .map(|r| self.data[r * self.tokens..(r + 1) * self.tokens].iter().zip(values).map(|(a, b)| a * b).sum())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W3Variant {
    /// `W3 = 1 − M1·M2`.
    #[default]
    Verbatim,
    /// `W3 = 1 − (M1 ∪ M2)`.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
}

pub fn compute_region_weights(m1: &SpatialMask, m2: &SpatialMask, w_hat: f64) -> Result<RegionWeights> {
    compute_region_weights_with(m1, m2, w_hat, W3Variant::Verbatim)
}

pub fn compute_region_weights_with(
    m1: &SpatialMask,
    m2: &SpatialMask,
    w_hat: f64,
    variant: W3Variant,
) -> Result<RegionWeights> {
    if !(0.0..=1.0).contains(&w_hat) {
        return Err(Error::InvalidRange(format!("w_hat must lie in [0, 1], got {w_hat}")));
    }
    m1.same_shape(m2)?;
    let n = m1.len();
    let (mut w1, mut w2, mut w3) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (a, b) in m1.values.iter().zip(&m2.values) {
        let both = a * b;
        w1.push(a * (1.0 - b) + w_hat * both);
        w2.push(b * (1.0 - a) + (1.0 - w_hat) * both);
        w3.push(match variant {
            W3Variant::Verbatim => 1.0 - both,
            W3Variant::Union => 1.0 - (a + b - both),
        });
    }
    Ok(RegionWeights { w1, w2, w3 })
}

pub const ZERO_ROW_TOLERANCE: f64 = 1e-12;

/// Row-gated fusion `normalize(W1·S1 + W2·S2 + W3·S3)` with weights taken per
/// query row. Zero-weight terms are skipped, and rows gated purely to `S3` are
/// copied unchanged.
pub fn fuse_self_attention(
    s1: &SelfAttnMap,
    s2: &SelfAttnMap,
    s3: &SelfAttnMap,
    w: &RegionWeights,
) -> Result<SelfAttnMap> {
    let n = s3.n;
    check_dim(n, s1.n)?;
    check_dim(n, s2.n)?;
    check_dim(n, w.w1.len())?;
    check_dim(n, w.w2.len())?;
    check_dim(n, w.w3.len())?;
    let mut data = Vec::with_capacity(n * n);
    let mut raw = vec![0.0; n];
    for p in 0..n {
        let (a, b, c) = (w.w1[p], w.w2[p], w.w3[p]);
        if a == 0.0 && b == 0.0 && c == 1.0 {
            data.extend_from_slice(s3.row(p));
            continue;
        }
        raw.iter_mut().for_each(|x| *x = 0.0);
        for (weight, map) in [(a, s1), (b, s2), (c, s3)] {
            if weight != 0.0 {
                for (r, s) in raw.iter_mut().zip(map.row(p)) {
                    *r += weight * s;
                }
            }
        }
        let sum: f64 = raw.iter().sum();
        if sum <= ZERO_ROW_TOLERANCE {
            return Err(Error::ZeroRow { row: p, sum });
        }
        data.extend(raw.iter().map(|x| x / sum));
    }
    Ok(SelfAttnMap { n, data })
}

fn check_tokens(t1: &[usize], t2: &[usize], len: usize) -> Result<()> {
    for &i in t1.iter().chain(t2) {
        if i >= len {
            return Err(Error::TokenOutOfRange { index: i, len });
        }
    }
    if let Some(&i) = t1.iter().find(|i| t2.contains(i)) {
        return Err(Error::OverlappingTokens(i));
    }
    Ok(())
}

/// Whole-column transplant: token columns in `t1` come from `a1`, in `t2` from
/// `a2`, the rest from `a3`. Rows are not renormalized.
pub fn replace_cross_attention(
    a1: &CrossAttnMap,
    a2: &CrossAttnMap,
    a3: &CrossAttnMap,
    t1: &[usize],
    t2: &[usize],
) -> Result<CrossAttnMap> {
    for a in [a1, a2] {
        check_dim(a3.n * a3.tokens, a.n * a.tokens)?;
        check_dim(a3.tokens, a.tokens)?;
    }
    check_tokens(t1, t2, a3.tokens)?;
    let mut out = a3.clone();
    for (src, set) in [(a1, t1), (a2, t2)] {
        for &c in set {
            for r in 0..out.n {
                out.data[r * out.tokens + c] = src.get(r, c);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Down,
    Mid,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerTag {
    pub block: Block,
    /// Spatial token count `H·W` of the layer.
    pub resolution: usize,
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = match self.block {
            Block::Down => "down",
            Block::Mid => "mid",
            Block::Up => "up",
        };
        write!(f, "{b}_{}", self.resolution)
    }
}

impl FromStr for LayerTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (b, r) = s.split_once('_').ok_or_else(|| Error::Parse(format!("bad layer tag {s:?}")))?;
        let block = match b {
            "down" => Block::Down,
            "mid" => Block::Mid,
            "up" => Block::Up,
            _ => return Err(Error::Parse(format!("bad layer block {b:?}"))),
        };
        let resolution = r.parse().map_err(|e| Error::Parse(format!("bad layer resolution {r:?}: {e}")))?;
        Ok(LayerTag { block, resolution })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub tag: LayerTag,
    pub self_replace: bool,
    pub cross_replace: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPolicy {
    pub layers: Vec<LayerSpec>,
}

impl LayerPolicy {
    /// Self fusion on down and mid blocks, cross replacement everywhere;
    /// `up_256_self` also fuses the 256-token up layer.
    pub fn standard(layers: &[LayerTag], up_256_self: bool) -> Self {
        let layers = layers
            .iter()
            .map(|&tag| LayerSpec {
                tag,
                self_replace: match tag.block {
                    Block::Down | Block::Mid => true,
                    Block::Up => up_256_self && tag.resolution == 256,
                },
                cross_replace: true,
            })
            .collect();
        Self { layers }
    }

    /// Layer layout of the backbone: down 4096/1024/256, mid 64, up 256/1024/4096.
    pub fn backbone_layers() -> Vec<LayerTag> {
        use Block::*;
        [(Down, 4096), (Down, 1024), (Down, 256), (Mid, 64), (Up, 256), (Up, 1024), (Up, 4096)]
            .into_iter()
            .map(|(block, resolution)| LayerTag { block, resolution })
            .collect()
    }

    pub fn disabled(layers: &[LayerTag]) -> Self {
        Self {
            layers: layers.iter().map(|&tag| LayerSpec { tag, self_replace: false, cross_replace: false }).collect(),
        }
    }

    pub fn spec(&self, tag: LayerTag) -> Result<&LayerSpec> {
        self.layers.iter().find(|l| l.tag == tag).ok_or_else(|| Error::UnknownLayer(tag.to_string()))
    }

    pub fn is_active(&self) -> bool {
        self.layers.iter().any(|l| l.self_replace || l.cross_replace)
    }
}

impl Default for LayerPolicy {
    fn default() -> Self {
        Self::standard(&Self::backbone_layers(), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingConfig {
    pub w_hat: f64,
    pub tokens_1: Vec<usize>,
    pub tokens_2: Vec<usize>,
    pub w3_variant: W3Variant,
    pub up_256_self: bool,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            w_hat: 0.5,
            tokens_1: Vec::new(),
            tokens_2: Vec::new(),
            w3_variant: W3Variant::Verbatim,
            up_256_self: false,
        }
    }
}

impl GatingConfig {
    pub fn validate(&self, token_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w_hat) {
            return Err(Error::InvalidRange(format!("w_hat must lie in [0, 1], got {}", self.w_hat)));
        }
        check_tokens(&self.tokens_1, &self.tokens_2, token_count)
    }
}

/// Maps of one layer for the three streams (sources 1, 2 and the target).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps {
    pub self_maps: [SelfAttnMap; 3],
    pub cross_maps: [CrossAttnMap; 3],
}

/// Target-stream maps after gating.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedMaps {
    pub self_map: SelfAttnMap,
    pub cross_map: CrossAttnMap,
    pub self_replaced: bool,
    pub cross_replaced: bool,
}

/// Gate one layer's target maps as the policy dictates. Weights must match the
/// layer resolution. `step` is accepted for per-step policies; the shipped
/// policies apply at every step.
pub fn apply_layer_policy(
    policy: &LayerPolicy,
    tag: LayerTag,
    _step: usize,
    maps: &LayerMaps,
    weights: &RegionWeights,
    cfg: &GatingConfig,
) -> Result<GatedMaps> {
    let spec = policy.spec(tag)?;
    let [s1, s2, s3] = &maps.self_maps;
    let [a1, a2, a3] = &maps.cross_maps;
    let self_map = if spec.self_replace { fuse_self_attention(s1, s2, s3, weights)? } else { s3.clone() };
    let cross_map = if spec.cross_replace {
        replace_cross_attention(a1, a2, a3, &cfg.tokens_1, &cfg.tokens_2)?
    } else {
        a3.clone()
    };
    Ok(GatedMaps { self_map, cross_map, self_replaced: spec.self_replace, cross_replaced: spec.cross_replace })
}

/// `m⊙z_gen + (1−m)⊙(√ᾱ_t·z_src + √(1−ᾱ_t)·noise)`.
pub fn latent_blend(
    z_gen: &[f64],
    z_src: &[f64],
    mask: &SpatialMask,
    t: f64,
    schedule: &NoiseSchedule,
    noise: &[f64],
) -> Result<Latent> {
    let d = z_gen.len();
    check_dim(d, z_src.len())?;
    check_dim(d, mask.len())?;
    check_dim(d, noise.len())?;
    let a = schedule.alpha_bar(t);
    let (ra, s) = (a.sqrt(), (1.0 - a).max(0.0).sqrt());
    Ok((0..d)
        .map(|j| {
            let m = mask.values[j];
            let src = ra * z_src[j] + s * noise[j];
            if m == 1.0 {
                z_gen[j]
            } else if m == 0.0 {
                src
            } else {
                m * z_gen[j] + (1.0 - m) * src
            }
        })
        .collect())
}

/// Bhattacharyya coefficient of two distributions.
pub fn bhattacharyya(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum()
}

/// Row-stochastic map from a seeded softmax of Gaussian logits.
pub fn random_self_map(n: usize, temperature: f64, rng: &mut impl Rng) -> SelfAttnMap {
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        let logits: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) / temperature).collect();
        data.extend(softmax(&logits));
    }
    SelfAttnMap { n, data }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepScenario {
    /// Both elements should survive in the overlap; the score is the smaller
    /// of the two mean per-row retentions.
    CoExistence,
    /// Source 2 lies on top of source 1 with the given opacity; the score is
    /// the retention of the occlusion composite.
    LayerCoverage { top_opacity: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub w_hat: f64,
    pub score: f64,
}

/// Score fused overlap rows for each `ŵ` on a synthetic two-source layout.
/// Source 1 covers the left two thirds of a `side×side` grid, source 2 the
/// right two thirds; maps are drawn from `seed`.
pub fn what_sweep(scenario: SweepScenario, values: &[f64], side: usize, seed: u64) -> Result<Vec<SweepPoint>> {
    let n = side * side;
    let cut = (2 * side).div_ceil(3);
    let m1 = SpatialMask::rect(side, side, 0, side, 0, cut)?;
    let m2 = SpatialMask::rect(side, side, 0, side, side - cut, side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1 = random_self_map(n, 0.5, &mut rng);
    let s2 = random_self_map(n, 0.5, &mut rng);
    let s3 = random_self_map(n, 0.5, &mut rng);
    let overlap: Vec<usize> = (0..n).filter(|&p| m1.values[p] * m2.values[p] > 0.0).collect();
    if overlap.is_empty() {
        return Err(Error::InvalidRange(format!("side {side} leaves no overlap")));
    }
    let mut out = Vec::with_capacity(values.len());
    for &w_hat in values {
        let w = compute_region_weights(&m1, &m2, w_hat)?;
        let fused = fuse_self_attention(&s1, &s2, &s3, &w)?;
        let mean = |f: &dyn Fn(usize) -> f64| overlap.iter().map(|&p| f(p)).sum::<f64>() / overlap.len() as f64;
        let score = match scenario {
            SweepScenario::CoExistence => {
                let r1 = mean(&|p| bhattacharyya(fused.row(p), s1.row(p)));
                let r2 = mean(&|p| bhattacharyya(fused.row(p), s2.row(p)));
                r1.min(r2)
            }
            SweepScenario::LayerCoverage { top_opacity } => mean(&|p| {
                let composite: Vec<f64> =
                    s1.row(p).iter().zip(s2.row(p)).map(|(a, b)| (1.0 - top_opacity) * a + top_opacity * b).collect();
                bhattacharyya(fused.row(p), &composite)
            }),
        };
        out.push(SweepPoint { w_hat, score });
    }
    Ok(out)
}

/// Sweep point with the highest score; ties keep the earlier value.
pub fn best_point(points: &[SweepPoint]) -> Option<SweepPoint> {
    points.iter().copied().fold(None, |best, p| match best {
        Some(b) if b.score >= p.score => Some(b),
        _ => Some(p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[f64]) -> SpatialMask {
        SpatialMask::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn disjoint_masks() {
        let w = compute_region_weights(&mask(&[1.0, 0.0, 0.0]), &mask(&[0.0, 0.0, 1.0]), 0.3).unwrap();
        assert_eq!(w.w1, vec![1.0, 0.0, 0.0]);
        assert_eq!(w.w2, vec![0.0, 0.0, 1.0]);
        assert_eq!(w.w3, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn full_overlap_half_weight() {
        let w = compute_region_weights(&mask(&[1.0; 4]), &mask(&[1.0; 4]), 0.5).unwrap();
        assert_eq!(w.w1, vec![0.5; 4]);
        assert_eq!(w.w2, vec![0.5; 4]);
        assert_eq!(w.w3, vec![0.0; 4]);
        let w = compute_region_weights(&mask(&[1.0]), &mask(&[1.0]), 1.0).unwrap();
        assert_eq!((w.w1[0], w.w2[0]), (1.0, 0.0));
        let w = compute_region_weights(&mask(&[1.0]), &mask(&[1.0]), 0.0).unwrap();
        assert_eq!((w.w1[0], w.w2[0]), (0.0, 1.0));
    }

    #[test]
    fn union_variant() {
        let w = compute_region_weights_with(&mask(&[1.0, 1.0, 0.0]), &mask(&[0.0, 1.0, 0.0]), 0.5, W3Variant::Union)
            .unwrap();
        assert_eq!(w.w3, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn resolution_mismatch() {
        assert!(compute_region_weights(&mask(&[1.0]), &mask(&[1.0, 0.0]), 0.5).is_err());
        assert!(compute_region_weights(&mask(&[1.0]), &mask(&[1.0]), 1.5).is_err());
    }

    #[test]
    fn pure_s3_rows_pass_through() {
        let s = SelfAttnMap::new(2, vec![0.3, 0.7, 0.6, 0.4]).unwrap();
        let o = SelfAttnMap::new(2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let w = RegionWeights { w1: vec![0.0; 2], w2: vec![0.0; 2], w3: vec![1.0; 2] };
        assert_eq!(fuse_self_attention(&o, &o, &s, &w).unwrap(), s);
    }

    #[test]
    fn zero_row_rejected() {
        let s = SelfAttnMap::new(1, vec![1.0]).unwrap();
        let w = RegionWeights { w1: vec![0.0], w2: vec![0.0], w3: vec![0.0] };
        assert!(matches!(fuse_self_attention(&s, &s, &s, &w), Err(Error::ZeroRow { row: 0, .. })));
    }

    #[test]
    fn cross_replacement_columns() {
        let mk = |v: f64| CrossAttnMap::new(2, 8, vec![v; 16]).unwrap();
        let out = replace_cross_attention(&mk(1.0), &mk(2.0), &mk(3.0), &[2], &[5]).unwrap();
        for r in 0..2 {
            for c in 0..8 {
                let want = match c {
                    2 => 1.0,
                    5 => 2.0,
                    _ => 3.0,
                };
                assert_eq!(out.get(r, c), want);
            }
        }
        assert_eq!(replace_cross_attention(&mk(1.0), &mk(2.0), &mk(3.0), &[], &[]).unwrap(), mk(3.0));
        assert!(matches!(
            replace_cross_attention(&mk(1.0), &mk(2.0), &mk(3.0), &[8], &[]),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            replace_cross_attention(&mk(1.0), &mk(2.0), &mk(3.0), &[1], &[1]),
            Err(Error::OverlappingTokens(1))
        ));
    }

    #[test]
    fn layer_tags() {
        let t: LayerTag = "up_256".parse().unwrap();
        assert_eq!(t, LayerTag { block: Block::Up, resolution: 256 });
        assert_eq!(t.to_string(), "up_256");
        assert!("side_3".parse::<LayerTag>().is_err());
        let p = LayerPolicy::default();
        assert!(p.spec(LayerTag { block: Block::Up, resolution: 512 }).is_err());
        assert!(!p.spec(t).unwrap().self_replace);
        assert!(p.spec("mid_64".parse().unwrap()).unwrap().self_replace);
        let p = LayerPolicy::standard(&LayerPolicy::backbone_layers(), true);
        assert!(p.spec(t).unwrap().self_replace);
        assert!(!p.spec("up_1024".parse().unwrap()).unwrap().self_replace);
    }

    #[test]
    fn blend_endpoints() {
        let s = NoiseSchedule::default();
        let g = [1.0, 2.0, 3.0, 4.0];
        let src = [-1.0, -2.0, -3.0, -4.0];
        let noise = [0.5, 0.5, 0.5, 0.5];
        let ones = SpatialMask::filled(2, 2, 1.0).unwrap();
        let zeros = SpatialMask::filled(2, 2, 0.0).unwrap();
        assert_eq!(latent_blend(&g, &src, &ones, 0.7, &s, &noise).unwrap(), g.to_vec());
        assert_eq!(latent_blend(&g, &src, &zeros, 0.0, &s, &noise).unwrap(), src.to_vec());
        assert!(latent_blend(&g, &src[..3], &ones, 0.5, &s, &noise).is_err());
    }

    #[test]
    fn mask_io() {
        let m = SpatialMask::from_text("0 1\n1 0.5\n").unwrap();
        assert_eq!((m.height, m.width), (2, 2));
        assert_eq!(m.values, vec![0.0, 1.0, 1.0, 0.5]);
        assert!(SpatialMask::from_text("0 1\n1\n").is_err());
        assert!(SpatialMask::from_text("0 2\n").is_err());
        let p2 = SpatialMask::from_pgm(b"P2\n# c\n2 1\n255\n0 255\n").unwrap();
        assert_eq!(p2.values, vec![0.0, 1.0]);
        let mut p5 = b"P5 3 1 255\n".to_vec();
        p5.extend([0u8, 255, 51]);
        let p5 = SpatialMask::from_pgm(&p5).unwrap();
        assert_eq!(p5.values, vec![0.0, 1.0, 0.2]);
    }

    #[test]
    fn resample_nearest() {
        let m = SpatialMask::rect(4, 4, 0, 2, 0, 2).unwrap();
        let small = m.resample(2, 2).unwrap();
        assert_eq!(small.values, vec![1.0, 0.0, 0.0, 0.0]);
        let big = small.resample(4, 4).unwrap();
        assert_eq!(big, m);
    }
}
