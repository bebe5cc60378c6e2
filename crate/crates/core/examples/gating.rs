//! Region-weighted self-attention fusion and token-selective cross-attention
//! replacement on random maps, followed by the synthetic ŵ sweeps.

use editedid::gating::{
    best_point, compute_region_weights, fuse_self_attention, random_self_map, replace_cross_attention, what_sweep,
    CrossAttnMap, SpatialMask, SweepScenario,
};
use rand::{Rng, SeedableRng};

fn main() -> editedid::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let side = 4;
    let n = side * side;
    let m1 = SpatialMask::rect(side, side, 0, 3, 0, 3)?;
    let m2 = SpatialMask::rect(side, side, 1, 4, 1, 4)?;
    let w = compute_region_weights(&m1, &m2, 0.5)?;
    let s: Vec<_> = (0..3).map(|_| random_self_map(n, 1.0, &mut rng)).collect();
    let fused = fuse_self_attention(&s[0], &s[1], &s[2], &w)?;
    let worst = (0..n).map(|p| (fused.row(p).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    println!("fused {n}x{n} self map, max |row sum - 1| = {worst:.1e}");

    let tokens = 8;
    let cross: Vec<CrossAttnMap> = (0..3)
        .map(|_| CrossAttnMap::new(n, tokens, (0..n * tokens).map(|_| rng.gen_range(0.0..1.0)).collect()))
        .collect::<editedid::Result<_>>()?;
    let replaced = replace_cross_attention(&cross[0], &cross[1], &cross[2], &[2], &[5])?;
    for c in 0..tokens {
        let src = if replaced.column(c) == cross[0].column(c) {
            "source 1"
        } else if replaced.column(c) == cross[1].column(c) {
            "source 2"
        } else {
            "target"
        };
        println!("token {c}: {src}");
    }

    let values: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    for scenario in [SweepScenario::CoExistence, SweepScenario::LayerCoverage { top_opacity: 0.7 }] {
        let points = what_sweep(scenario, &values, 12, 0)?;
        let best = best_point(&points).expect("non-empty sweep");
        println!("{scenario:?}: best w_hat {} (score {:.3})", best.w_hat, best.score);
    }
    Ok(())
}
