//! Jointly invert the two default sources and print the λ schedule, the
//! alignment loss and the merge step.

use editedid::align::align_inversion;
use editedid::config::ExperimentConfig;
use editedid::nulltext::EmbeddingSchedule;
use editedid::pipeline::build_scenario;

fn main() -> editedid::Result<()> {
    let cfg = ExperimentConfig::default();
    let sc = build_scenario(&cfg)?;
    let n = sc.plan.len();
    let embs = [
        EmbeddingSchedule::conditional_only(sc.conds[0].clone(), n),
        EmbeddingSchedule::conditional_only(sc.conds[1].clone(), n),
    ];
    let pair = align_inversion(
        &sc.plan,
        &sc.schedule,
        &sc.oracles[0],
        &sc.oracles[1],
        &sc.sources[0],
        &sc.sources[1],
        &embs[0],
        &embs[1],
        &cfg.align,
    )?;
    print!("{}", pair.to_csv());
    println!("merged at step {}", pair.merge_step);
    for w in &pair.warnings {
        println!("warning {w:?}");
    }
    Ok(())
}
