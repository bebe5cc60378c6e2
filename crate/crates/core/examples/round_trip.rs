//! Invert a source to noise and reconstruct it with plain DDIM at increasing
//! step counts, then with the hybrid plan.

use editedid::config::ExperimentConfig;
use editedid::experiments::round_trip;
use editedid::metrics::stability_report;
use editedid::pipeline::build_scenario;
use editedid::schedule::HybridPlan;

fn main() -> editedid::Result<()> {
    let cfg = ExperimentConfig::default();
    let sc = build_scenario(&cfg)?;
    println!("steps  {}", editedid::metrics::StabilityReport::CSV_HEADER);
    for steps in [6, 12, 25, 50, 100] {
        let (inv, rec) = round_trip(&sc, &HybridPlan::ddim_only(steps)?.intervals())?;
        let r = stability_report(&inv, &rec, &sc.sources[0], None)?;
        println!("{steps:>5}  {}", r.csv_row());
    }
    let (inv, rec) = round_trip(&sc, &sc.plan.intervals())?;
    let r = stability_report(&inv, &rec, &sc.sources[0], None)?;
    println!("hybrid {}", r.csv_row());
    Ok(())
}
