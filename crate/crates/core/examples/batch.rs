//! Run several seeds in parallel, then check the results against sequential
//! runs. One item is deliberately invalid to show failure isolation.

use std::time::Instant;

use editedid::config::ExperimentConfig;
use editedid::pipeline::{run_editedid, run_parallel_batch};

fn main() -> editedid::Result<()> {
    let base = ExperimentConfig {
        sources: editedid::config::SourceConfig { side: 8, embed_dim: 48, ..Default::default() },
        ..Default::default()
    };
    let mut configs: Vec<ExperimentConfig> = (0..4).map(|seed| ExperimentConfig { seed, ..base.clone() }).collect();
    configs[3].nulltext.lr = -1.0;
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(configs.len());
    let t = Instant::now();
    let results = run_parallel_batch(&configs, workers)?;
    println!("{} items on {workers} workers in {:.2}s", configs.len(), t.elapsed().as_secs_f64());
    for (cfg, r) in configs.iter().zip(&results) {
        match r {
            Ok(res) => {
                let same = run_editedid(cfg).map(|s| s.outputs == res.outputs).unwrap_or(false);
                println!(
                    "seed {}: min psnr {:.2} dB, equal to sequential run: {same}",
                    cfg.seed,
                    res.outputs.pair.min_psnr()
                );
            }
            Err(e) => println!("seed {}: failed: {e}", cfg.seed),
        }
    }
    Ok(())
}
