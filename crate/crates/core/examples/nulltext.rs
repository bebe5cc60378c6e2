//! Optimize per-step null embeddings for both identities on the shared
//! latent and compare the fixed-rate and exact line-search rules.

use editedid::config::ExperimentConfig;
use editedid::nulltext::StepRule;
use editedid::pipeline::run_alignment_and_nulltext;

fn main() {
    for (rule, iterations) in [(StepRule::Fixed, 10), (StepRule::Exact, 10), (StepRule::Exact, 500)] {
        let mut cfg = ExperimentConfig::default();
        cfg.entangle.enabled = false;
        cfg.nulltext.step_rule = rule;
        cfg.nulltext.iterations = iterations;
        let (_, out) = match run_alignment_and_nulltext(&cfg) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("ERROR {e}");
                std::process::exit(3);
            }
        };
        let worst = |k: usize| out.identities[k].residuals.iter().cloned().fold(0.0, f64::max);
        println!(
            "{rule:?} x{iterations}: psnr {:.2}/{:.2} dB, worst step residual {:.2e}/{:.2e}, unconverged steps {}/{}",
            out.stability[0].psnr_db,
            out.stability[1].psnr_db,
            worst(0),
            worst(1),
            out.identities[0].reports.len(),
            out.identities[1].reports.len(),
        );
    }
}
