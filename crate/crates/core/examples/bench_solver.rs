//! Round-trip stability of DDIM-only, DPM-only, fragmented and global hybrid
//! plans at eleven steps with DPM on the five data-side steps.

use editedid::config::ExperimentConfig;
use editedid::experiments::bench_solver;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.plan.steps = 11;
    cfg.plan.s1 = 0;
    cfg.plan.s2 = 5;
    cfg.entangle.enabled = false;
    let rows = match bench_solver(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("ERROR {e}");
            std::process::exit(3);
        }
    };
    println!("{:<11} {:>9} {:>9} {:>13}", "variant", "psnr_db", "max_jump", "boundary_jump");
    for r in rows {
        println!("{:<11} {:>9.2} {:>9.4} {:>13.4e}", r.variant, r.report.psnr_db, r.report.max_jump, r.boundary_jump);
    }
}
