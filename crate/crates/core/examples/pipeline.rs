//! Full run on the default 16×16 scenario: align, optimize nulls, generate
//! the three streams with face/glasses gating and print the summary.

use editedid::config::ExperimentConfig;
use editedid::pipeline::run_editedid;

fn main() {
    let cfg = ExperimentConfig::default();
    match run_editedid(&cfg) {
        Ok(r) => print!("{}", r.summary()),
        Err(e) => {
            eprintln!("ERROR {e}");
            std::process::exit(3);
        }
    }
}
