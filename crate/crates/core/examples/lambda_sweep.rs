//! Sweep the initial mixing weight λ₀ on a small scenario and report
//! reconstruction quality and merge timing for each value.

use editedid::config::ExperimentConfig;
use editedid::experiments::sweep_lambda;

fn main() {
    let mut cfg = ExperimentConfig { seed: 1, ..Default::default() };
    cfg.sources.side = 8;
    cfg.sources.embed_dim = 48;
    cfg.entangle.enabled = false;
    let values = [0.02, 0.04, 0.06, 0.08, 0.1, 0.3, 0.5];
    match sweep_lambda(&cfg, &values) {
        Ok(rows) => {
            println!("lambda0  min_psnr  merge_step  loss_increases");
            for r in rows {
                println!("{:>7}  {:>8.2}  {:>10}  {:>14}", r.init_lambda, r.min_psnr, r.merge_step, r.loss_increases);
            }
        }
        Err(e) => {
            eprintln!("ERROR {e}");
            std::process::exit(3);
        }
    }
}
