//! Small attention substrate for exercising the gating path end to end.
//!
//! Each layer pools the latent-sized data estimate to its grid, builds a
//! self-attention map from spatial proximity and value similarity and a
//! cross-attention map over seeded token keys, and writes its attention
//! output back as a residual on the target's data estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ToyAttentionConfig;
use crate::error::{check_dim, Error, Result};
use crate::gating::{
    replace_cross_attention, softmax, Block, CrossAttnMap, GatingConfig, LayerPolicy, LayerTag, RegionWeights,
    SelfAttnMap, SpatialMask, ZERO_ROW_TOLERANCE,
};
use crate::predictor::Latent;

#[derive(Debug, Clone)]
struct ToyLayer {
    tag: LayerTag,
    side: usize,
    factor: usize,
    jitter: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyAttention {
    side: usize,
    cfg: ToyAttentionConfig,
    layers: Vec<ToyLayer>,
    token_keys: Vec<f64>,
    token_bias: Vec<f64>,
    token_values: Vec<f64>,
}

/// Per-layer region weights for a pair of full-resolution masks.
#[derive(Debug, Clone)]
pub struct LayerWeights(Vec<RegionWeights>);

impl ToyAttention {
    /// Down and up layers at full resolution, a mid layer at half resolution
    /// when the grid divides evenly.
    pub fn new(side: usize, cfg: ToyAttentionConfig, seed: u64) -> Result<Self> {
        if side < 2 {
            return Err(Error::InvalidRange(format!("toy grid side {side} too small")));
        }
        if !(cfg.length_scale > 0.0 && cfg.value_temperature > 0.0) {
            return Err(Error::InvalidRange("toy attention scales must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_a7e5);
        let mut layout = vec![(Block::Down, 1)];
        if side.is_multiple_of(2) {
            layout.push((Block::Mid, 2));
        }
        layout.push((Block::Up, 1));
        let layers = layout
            .into_iter()
            .map(|(block, factor)| {
                let s = side / factor;
                let n = s * s;
                let jitter = (0..n * n).map(|_| cfg.jitter * rng.sample::<f64, _>(StandardNormal)).collect();
                ToyLayer { tag: LayerTag { block, resolution: n }, side: s, factor, jitter }
            })
            .collect();
        let k = cfg.tokens;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let token_keys = draw(k);
        let token_bias = draw(k);
        let token_values = draw(k);
        Ok(Self { side, cfg, layers, token_keys, token_bias, token_values })
    }

    pub fn layer_tags(&self) -> Vec<LayerTag> {
        self.layers.iter().map(|l| l.tag).collect()
    }

    pub fn policy(&self, gating: &GatingConfig) -> LayerPolicy {
        LayerPolicy::standard(&self.layer_tags(), gating.up_256_self)
    }

    pub fn layer_weights(&self, m1: &SpatialMask, m2: &SpatialMask, gating: &GatingConfig) -> Result<LayerWeights> {
        self.layers
            .iter()
            .map(|l| {
                let a = m1.resample(l.side, l.side)?;
                let b = m2.resample(l.side, l.side)?;
                crate::gating::compute_region_weights_with(&a, &b, gating.w_hat, gating.w3_variant)
            })
            .collect::<Result<Vec<_>>>()
            .map(LayerWeights)
    }

    fn pool(&self, v: &[f64], factor: usize) -> Vec<f64> {
        if factor == 1 {
            return v.to_vec();
        }
        let s = self.side / factor;
        let mut out = vec![0.0; s * s];
        for r in 0..self.side {
            for c in 0..self.side {
                out[(r / factor) * s + c / factor] += v[r * self.side + c];
            }
        }
        let k = (factor * factor) as f64;
        out.iter_mut().for_each(|x| *x /= k);
        out
    }

    fn upsample_into(&self, acc: &mut [f64], v: &[f64], factor: usize, scale: f64) {
        let s = self.side / factor;
        for r in 0..self.side {
            for c in 0..self.side {
                acc[r * self.side + c] += scale * v[(r / factor) * s + c / factor];
            }
        }
    }

    fn self_map(&self, layer: &ToyLayer, field: &[f64]) -> SelfAttnMap {
        let s = layer.side;
        let n = s * s;
        let (l2, tau) = (self.cfg.length_scale * self.cfg.length_scale, self.cfg.value_temperature);
        let mut data = Vec::with_capacity(n * n);
        let mut logits = vec![0.0; n];
        for p in 0..n {
            let (pr, pc) = ((p / s) as f64, (p % s) as f64);
            for q in 0..n {
                let (qr, qc) = ((q / s) as f64, (q % s) as f64);
                let dist2 = (pr - qr).powi(2) + (pc - qc).powi(2);
                let dv = field[p] - field[q];
                logits[q] = -dist2 / l2 - dv * dv / tau + layer.jitter[p * n + q];
            }
            data.extend(softmax(&logits));
        }
        SelfAttnMap { n, data }
    }

    fn cross_map(&self, field: &[f64]) -> CrossAttnMap {
        let k = self.cfg.tokens;
        let mut data = Vec::with_capacity(field.len() * k);
        for &f in field {
            let logits: Vec<f64> = self.token_keys.iter().zip(&self.token_bias).map(|(w, b)| w * f + b).collect();
            data.extend(softmax(&logits));
        }
        CrossAttnMap { n: field.len(), tokens: k, data }
    }

    /// Gate the target stream's data estimate against the two sources.
    ///
    /// Self-attention contributions are attributed to their source: fused
    /// rows read `Σ Wᵢ·Sᵢ·vᵢ / Σ Wᵢ·rowsum(Sᵢ)` where `vᵢ` is stream `i`'s
    /// pooled estimate. The residual added to the target is the mean of the
    /// fused-minus-own outputs over self-gated layers, plus the scaled change
    /// of each cross-gated layer's token readout.
    pub fn gate(
        &self,
        policy: &LayerPolicy,
        weights: &LayerWeights,
        gating: &GatingConfig,
        x0: [&[f64]; 3],
    ) -> Result<Latent> {
        let d = self.side * self.side;
        for v in x0 {
            check_dim(d, v.len())?;
        }
        check_dim(self.layers.len(), weights.0.len())?;
        let mut self_acc = vec![0.0; d];
        let mut cross_acc = vec![0.0; d];
        let mut self_layers = 0usize;
        for (layer, w) in self.layers.iter().zip(&weights.0) {
            let spec = policy.spec(layer.tag)?;
            if !spec.self_replace && !spec.cross_replace {
                continue;
            }
            let v: Vec<Vec<f64>> = x0.iter().map(|x| self.pool(x, layer.factor)).collect();
            if spec.self_replace {
                let maps: Vec<SelfAttnMap> = v.iter().map(|f| self.self_map(layer, f)).collect();
                let delta = attributed_delta(&maps, &v, w)?;
                self.upsample_into(&mut self_acc, &delta, layer.factor, 1.0);
                self_layers += 1;
            }
            if spec.cross_replace {
                let a: Vec<CrossAttnMap> = v.iter().map(|f| self.cross_map(f)).collect();
                let replaced = replace_cross_attention(&a[0], &a[1], &a[2], &gating.tokens_1, &gating.tokens_2)?;
                let before = a[2].apply(&self.token_values)?;
                let after = replaced.apply(&self.token_values)?;
                let delta: Vec<f64> = after.iter().zip(&before).map(|(x, y)| x - y).collect();
                self.upsample_into(&mut cross_acc, &delta, layer.factor, self.cfg.cross_gain);
            }
        }
        let k = self_layers.max(1) as f64;
        Ok((0..d).map(|j| x0[2][j] + self_acc[j] / k + cross_acc[j]).collect())
    }
}

/// Fused-minus-own self-attention output per row, attributed to sources.
fn attributed_delta(maps: &[SelfAttnMap], v: &[Vec<f64>], w: &RegionWeights) -> Result<Vec<f64>> {
    let n = maps[2].n;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let ws = [w.w1[p], w.w2[p], w.w3[p]];
        if ws[0] == 0.0 && ws[1] == 0.0 && ws[2] == 1.0 {
            out.push(0.0);
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..3 {
            if ws[i] != 0.0 {
                let row = maps[i].row(p);
                num += ws[i] * dot(row, &v[i]);
                den += ws[i] * row.iter().sum::<f64>();
            }
        }
        if den <= ZERO_ROW_TOLERANCE {
            return Err(Error::ZeroRow { row: p, sum: den });
        }
        out.push(num / den - dot(maps[2].row(p), &v[2]));
    }
    Ok(out)
}

/// Region labels of a pair of binary masks at full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    OnlyFirst,
    OnlySecond,
    Both,
    Neither,
}

pub fn region_of(m1: &SpatialMask, m2: &SpatialMask, idx: usize) -> Region {
    match (m1.values[idx] > 0.5, m2.values[idx] > 0.5) {
        (true, false) => Region::OnlyFirst,
        (false, true) => Region::OnlySecond,
        (true, true) => Region::Both,
        (false, false) => Region::Neither,
    }
}

/// Indices of `region`.
pub fn region_indices(m1: &SpatialMask, m2: &SpatialMask, region: Region) -> Vec<usize> {
    (0..m1.len()).filter(|&j| region_of(m1, m2, j) == region).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::compute_region_weights;

    fn toy() -> ToyAttention {
        ToyAttention::new(8, ToyAttentionConfig::default(), 3).unwrap()
    }

    #[test]
    fn layout() {
        let t = toy();
        let tags: Vec<String> = t.layer_tags().iter().map(|t| t.to_string()).collect();
        assert_eq!(tags, ["down_64", "mid_16", "up_64"]);
    }

    #[test]
    fn maps_are_stochastic() {
        let t = toy();
        let field: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let s = t.self_map(&t.layers[0], &field);
        for p in 0..64 {
            assert!((s.row(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = t.cross_map(&field);
        for p in 0..64 {
            assert!(((0..a.tokens).map(|c| a.get(p, c)).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_streams_leave_target_unchanged() {
        let t = toy();
        let m1 = SpatialMask::rect(8, 8, 0, 8, 0, 5).unwrap();
        let m2 = SpatialMask::rect(8, 8, 0, 8, 3, 8).unwrap();
        let g = GatingConfig { tokens_1: vec![1], tokens_2: vec![4], ..Default::default() };
        let w = t.layer_weights(&m1, &m2, &g).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.11).cos()).collect();
        let out = t.gate(&t.policy(&g), &w, &g, [&x, &x, &x]).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attributed_matches_fused_map_for_shared_values() {
        let t = toy();
        let fields: Vec<Vec<f64>> =
            (0..3).map(|k| (0..64).map(|i| ((i * (k + 2)) as f64 * 0.21).sin()).collect()).collect();
        let maps: Vec<SelfAttnMap> = fields.iter().map(|f| t.self_map(&t.layers[0], f)).collect();
        let m1 = SpatialMask::rect(8, 8, 0, 8, 0, 5).unwrap();
        let m2 = SpatialMask::rect(8, 8, 0, 8, 3, 8).unwrap();
        let w = compute_region_weights(&m1, &m2, 0.3).unwrap();
        let v = fields[0].clone();
        let fused = crate::gating::fuse_self_attention(&maps[0], &maps[1], &maps[2], &w).unwrap();
        let shared = vec![v.clone(), v.clone(), v.clone()];
        let delta = attributed_delta(&maps, &shared, &w).unwrap();
        let own = maps[2].apply(&v).unwrap();
        let want = fused.apply(&v).unwrap();
        for p in 0..64 {
            assert!((own[p] + delta[p] - want[p]).abs() < 1e-12);
        }
    }
}
